"""Command line entry point: ``cpcm select|filter|backtest|grid|synth|diagnose``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import backtest, config, diag
from .data import read_wide_csv, write_wide_csv
from .errors import ConfigError, DataError, NumericalError
from .filtering import fit_ar1_model, run_filter
from .screen import run_screen
from .synth import driver_library, gen_ou_market, ou_market_spec, write_market_csvs

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_synth(args, doc) -> None:
    cfg = config.build(config.SynthConfig, doc.get("synth"), "synth")
    seed = cfg.seed if args.seed is None else args.seed
    spec = ou_market_spec(
        cfg.n, cfg.m, cfg.T, seed, cfg.periods_per_year, cfg.driver_halflife_years,
        cfg.loading_scale, cfg.idio_vol, cfg.driver_obs_vol,
    )
    out = gen_ou_market(spec)
    library = driver_library(out, spec.dt, cfg.n_noise, seed)
    paths = write_market_csvs(_out_dir(args), out, library, cfg.start)
    print(json.dumps({k: str(v) for k, v in paths.items()}))


def cmd_select(args, doc) -> None:
    cfg = config.backtest_config(doc, args.seed)
    returns, names, library = backtest.load_aligned(args.assets, args.library)
    rows = slice(None) if args.full else slice(-cfg.window, None)
    selection = run_screen(returns.returns[rows], library[rows], cfg.screen_config())
    record = selection.to_dict()
    record["names"] = [names[i] for i in selection.indices]
    (_out_dir(args) / "selection.json").write_text(json.dumps(record, indent=2) + "\n")
    print(json.dumps(record))


def cmd_filter(args, doc) -> None:
    kind, fcfg = config.filter_section(doc)
    if args.seed is not None:
        fcfg = config.build(type(fcfg), {**fcfg.__dict__, "seed": args.seed}, "filter")
    dates, names, readings, _ = read_wide_csv(args.observations)
    model, prior = fit_ar1_model(readings)
    path = run_filter(model, readings, prior, kind, fcfg)
    out = _out_dir(args) / "posterior.csv"
    write_wide_csv(out, dates, path.column_names(), path.packed())
    print(str(out))


def cmd_backtest(args, doc) -> None:
    cfg = config.backtest_config(doc, args.seed)
    report = backtest.run_backtest(args.assets, args.library, cfg)
    paths = backtest.emit_report(report, _out_dir(args))
    print(json.dumps({k: str(v) for k, v in paths.items()}))


def cmd_grid(args, doc) -> None:
    configs = config.grid_configs(doc, args.seed)
    result = backtest.run_grid(args.assets, args.library, configs)
    out = _out_dir(args)
    path = backtest.emit_grid(result, out)
    for k, rep in enumerate(result.reports):
        backtest.emit_report(rep, out / f"run_{k:03d}")
    print(result.table.to_string(index=False))
    print(str(path))


def _read_return_columns(path: str) -> tuple[list[str], dict[str, np.ndarray]]:
    """Wide CSV (date + one column per series) or a backtest ``diagnostics.csv``."""
    head = pd.read_csv(path, nrows=0)
    if list(head.columns) == ["date", "metric", "value"]:
        frame = pd.read_csv(path, dtype={"value": str})
        frame = frame[frame["metric"].str.startswith("return:")]
        if frame.empty:
            raise DataError("no return series in the diagnostics file")
        wide = frame.pivot(index="date", columns="metric", values="value").astype(float).sort_index()
        wide.columns = [c.split(":", 1)[1] for c in wide.columns]
        return list(wide.index), {c: wide[c].to_numpy() for c in wide.columns}
    dates, names, values, _ = read_wide_csv(path)
    return [str(d)[:10] for d in dates], {name: values[:, j] for j, name in enumerate(names)}


def cmd_diagnose(args, doc) -> None:
    cfg = config.build(config.DiagConfig, doc.get("diag"), "diag")
    dates, series = _read_return_columns(args.returns)
    summary = {}
    for name, r in series.items():
        gains = np.concatenate([[0.0], np.cumsum(r)])
        entry = {"metrics": diag.perf_metrics(r, None, cfg.periods_per_year).to_dict()}
        if gains.size > cfg.window + 1:
            defect = diag.martingale_defect(gains, cfg.window)
            band = diag.martingale_null_band(gains, cfg.window, cfg.null_sims, seed=cfg.seed if args.seed is None else args.seed)
            entry["martingaleDefect"] = {"value": defect.value, "nullUpper": band.upper, "insideBand": band.contains(defect.value)}
        equity = np.cumprod(1.0 + r)
        if equity.size >= 63:
            labels, counts = np.unique(diag.regime_label(equity), return_counts=True)
            entry["regimeCounts"] = {str(k): int(v) for k, v in zip(labels, counts)}
        summary[name] = entry
    text = json.dumps(backtest._clean(summary), indent=2, sort_keys=True) + "\n"
    (_out_dir(args) / "diagnostics.json").write_text(text)
    print(text, end="")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cpcm", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, inputs=()):
        p.add_argument("--config", help="JSON document with one object per module")
        p.add_argument("--seed", type=int, help="overrides the configured seed")
        p.add_argument("--out", default="out", help="output directory")
        for name in inputs:
            p.add_argument(f"--{name}", required=True)
        return p

    common(sub.add_parser("synth", help="generate a synthetic OU market"))
    p = common(sub.add_parser("select", help="screen drivers on the latest window"), ("assets", "library"))
    p.add_argument("--full", action="store_true", help="use the whole sample instead of the last window")
    common(sub.add_parser("filter", help="filter noisy driver readings"), ("observations",))
    common(sub.add_parser("backtest", help="rolling out-of-sample backtest"), ("assets", "library"))
    common(sub.add_parser("grid", help="backtest grid with an aggregate table"), ("assets", "library"))
    common(sub.add_parser("diagnose", help="metrics, martingale defect and regimes"), ("returns",))
    return parser


COMMANDS = {
    "synth": cmd_synth,
    "select": cmd_select,
    "filter": cmd_filter,
    "backtest": cmd_backtest,
    "grid": cmd_grid,
    "diagnose": cmd_diagnose,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.seed is not None and args.seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        doc = config.load_document(args.config)
        COMMANDS[args.command](args, doc)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, NumericalError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
