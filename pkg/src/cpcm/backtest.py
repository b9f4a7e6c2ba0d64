"""Rolling out-of-sample pipeline: screen, filter, map, control, allocate, diagnose."""

from __future__ import annotations

import itertools
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from os import PathLike
from pathlib import Path

import numpy as np
import pandas as pd

from . import alloc, diag
from .data import compute_returns, ewma_mean, load_panel, read_wide_csv, robust_moments, shrink_cov
from .drivermap import NeuralMapSpec, fit_linear_map, fit_neural_map
from .errors import CPCMError, ConfigError, DataError
from .filtering import FilterConfig, fit_ar1_model, run_filter
from .pde import Grid1D, solve_hjb_1d
from .screen import ScreenConfig, run_screen

logger = logging.getLogger(__name__)

VARIANTS = ("V1", "V2", "V3", "V4")
GEOMETRIES = ("G1", "G2")
BASELINES = ("Markowitz", "BL", "EP")
COMPONENTS = ("selection", "filtering", "map", "control", "alloc")


@dataclass(frozen=True)
class BacktestConfig:
    window: int = 252
    cadence: int = 21
    m: int = 3
    screen_method: str = "combo"
    filter_kind: str = "ekf"
    variant: str = "V1"
    geometry: str = "G2"
    lambda_blend: float = 1.0
    seed: int = 0
    periods_per_year: int = 252
    # asset moments
    winsor_q: float = 0.01
    halflife: float = 21.0
    # maps
    map_ridge: float = 1e-6
    smooth_weight: float = 0.1
    # allocation
    lambda_mv: float = 2.0
    kkt_ridge: float = 1e-8
    vol_target: float = 0.10
    scale_clip: tuple[float, float] = (0.25, 4.0)
    lev_cap: float = 2.0
    turnover_target: float = 0.1
    # control
    gamma: float = 5.0
    theta_bound: float = 1.0  # amplitude only sees theta in [s_min - 1, s_max - 1]
    s_min: float = 0.5
    s_max: float = 1.5
    hjb_nx: int = 201
    hjb_half_width: float = 0.5
    # baselines
    baselines: bool = True
    bl_tau: float = 0.05
    ep_kl_budget: float = 0.5
    ep_floor: float = 1e-8
    # diagnostics
    defect_window: int = 63
    novikov_paths: int = 2000
    # nested module configs (m, method and seeds are overridden from the fields above)
    screen: ScreenConfig = field(default_factory=ScreenConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    neural: NeuralMapSpec = field(default_factory=NeuralMapSpec)

    def __post_init__(self):
        checks = [
            (self.window > self.m + 10, "window must exceed m + 10"),
            (self.cadence >= 1, "cadence must be >= 1"),
            (self.variant in VARIANTS, f"variant must be one of {VARIANTS}"),
            (self.geometry in GEOMETRIES, f"geometry must be one of {GEOMETRIES}"),
            (self.filter_kind in ("ekf", "pf"), "filter_kind must be ekf or pf"),
            (0.0 <= self.lambda_blend <= 1.0, "lambda_blend must lie in [0, 1]"),
            (self.lambda_mv > 0, "lambda_mv must be positive"),
            (self.turnover_target >= 0, "turnover_target must be non-negative"),
            (self.s_min <= self.s_max, "s_min must not exceed s_max"),
            (self.hjb_nx >= 5, "hjb_nx must be >= 5"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        # validates the method name and m through ScreenConfig
        self.screen_config()

    def screen_config(self) -> ScreenConfig:
        return replace(self.screen, m=self.m, method=self.screen_method, seed=self.seed)

    def filter_config(self, rebalance: int) -> FilterConfig:
        return replace(self.filter, seed=self.seed * 100_003 + rebalance)

    def neural_spec(self) -> NeuralMapSpec:
        smooth = self.smooth_weight if self.variant in ("V3", "V4") else 0.0
        return replace(self.neural, smooth_weight=smooth, seed=self.seed)

    @property
    def uses_hjb(self) -> bool:
        return self.variant != "V4"

    @property
    def label(self) -> str:
        return f"CPCM-{self.variant}"

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))


@dataclass
class AllocationTrace:
    dates: list[str]
    w_pre: np.ndarray  # K x n
    w_hjb: np.ndarray
    w_final: np.ndarray
    s_tau: np.ndarray  # K
    lambda_blend: float
    geometry: str
    variant: str
    selections: list[list[int]]
    flags: list[list[str]]


@dataclass
class BacktestReport:
    config: BacktestConfig
    assets: list[str]
    oos_dates: list[str]
    returns: dict[str, np.ndarray]
    weights: dict[str, np.ndarray]
    metrics: dict[str, diag.PerfMetrics]
    trace: AllocationTrace
    structural: diag.StructuralDiag
    regimes: np.ndarray
    rebalance_diag: dict[str, np.ndarray]
    timings: np.ndarray  # K x len(COMPONENTS)

    @property
    def main(self) -> str:
        return self.config.label


# ---------------------------------------------------------------- one rebalance


def _normalize_budget(w: np.ndarray) -> np.ndarray:
    # divide by |1'w| so a negative net position keeps its direction
    total = w.sum()
    if abs(total) > 1e-8 * np.abs(w).sum():
        return w / abs(total)
    gross = np.abs(w).sum()
    if gross == 0:
        raise DataError("zero pre-allocation")
    return w / gross


def _hjb_amplitude(cfg: BacktestConfig, w_pre: np.ndarray, tail: np.ndarray) -> tuple[float, list[str]]:
    """Amplitude from the 1-D HJB on rolling moments of the calibration tail."""
    p = tail @ w_pre
    length = cfg.cadence
    if p.size < 2 * length:
        length = max(2, p.size // 2)
    segments = np.lib.stride_tricks.sliding_window_view(p, length)[-length:]
    ppy = cfg.periods_per_year
    mu = segments.mean(axis=1) * ppy
    var = segments.var(axis=1, ddof=1) * ppy
    if np.any(var <= 0):
        return 1.0, ["hjb_degenerate_tail"]
    # cover drift displacement plus diffusion spread so boundaries stay out of reach
    horizon = length / ppy
    reach = cfg.theta_bound * (np.abs(mu).max() * horizon + 8.0 * np.sqrt(var.max() * horizon))
    half = max(cfg.hjb_half_width, reach)
    flags = []
    if cfg.gamma * half > 300.0:  # keep exp(-gamma x) finite at the grid edge
        half = 300.0 / cfg.gamma
        flags.append("hjb_grid_truncated")
    grid = Grid1D(-half, half, cfg.hjb_nx, 1.0 / ppy, length)
    result = solve_hjb_1d(grid, mu, var, cfg.gamma, cfg.theta_bound, s_min=cfg.s_min, s_max=cfg.s_max)
    return result.s_tau, flags + list(result.flags)


@dataclass
class _Step:
    w_pre: np.ndarray
    w_hjb: np.ndarray
    w_final: np.ndarray
    s_tau: float
    frame: np.ndarray | None
    selection: list[int]
    flags: list[str]
    timings: list[float]
    diag: dict[str, float]
    baselines: dict[str, tuple[np.ndarray, np.ndarray]]


def _rebalance(
    cfg: BacktestConfig,
    R: np.ndarray,
    X: np.ndarray,
    k: int,
    w_prev: np.ndarray,
    frame_prev: np.ndarray | None,
    base_prev: dict[str, np.ndarray],
) -> _Step:
    """Compute all weights for one rebalance from the window ``R`` (returns) and ``X`` (library)."""
    n = R.shape[1]
    clock = time.perf_counter
    timings = [0.0] * len(COMPONENTS)
    flags: list[str] = []
    info: dict[str, float] = {}

    t0 = clock()
    selection = run_screen(R, X, cfg.screen_config())
    idx = list(selection.indices)
    flags += selection.flags
    info["g_value"] = selection.g_value
    timings[0] = clock() - t0

    t0 = clock()
    model, prior = fit_ar1_model(X[:, idx])
    posterior = run_filter(model, X[:, idx], prior, cfg.filter_kind, cfg.filter_config(k))
    F = posterior.means
    timings[1] = clock() - t0

    t0 = clock()
    if cfg.variant == "V1":
        fitted = fit_linear_map(F, R, ridge=cfg.map_ridge)
    else:
        fitted = fit_neural_map(F, R, cfg.neural_spec())
    J = fitted.B
    info["span_fidelity"] = float("nan")
    timings[2] = clock() - t0

    t0 = clock()
    moments = robust_moments(R, cfg.winsor_q, cfg.halflife)
    mu, Sigma = moments.mean, moments.cov
    frame = None
    if cfg.geometry == "G2":
        transport = alloc.transport_basis(J, frame_prev)
        frame = transport.U_tilde
        flags += transport.flags
        info["grassmann_dist"] = transport.grassmann_dist
        if frame_prev is not None and frame_prev.shape == frame.shape:
            info["max_principal_angle"] = float(diag.principal_angles(frame, frame_prev).max())
        info["span_fidelity"] = float(np.mean(diag.span_fidelity(fitted.predict(F) - fitted.predict(F).mean(axis=0), frame)))
        w_pre = alloc.manifold_mv_kkt(frame, mu, Sigma, cfg.lambda_mv, cfg.kkt_ridge)
    else:
        mu_f = ewma_mean(F, cfg.halflife)
        sigma_f = shrink_cov(F)
        w_pre = _normalize_budget(J @ alloc.driver_mv_closed(mu_f, sigma_f, cfg.lambda_mv))
    alloc_time = clock() - t0

    t0 = clock()
    s_tau = 1.0
    if cfg.uses_hjb:
        s_tau, hjb_flags = _hjb_amplitude(cfg, w_pre, R)
        flags += hjb_flags
    w_hjb = s_tau * w_pre
    timings[3] = clock() - t0

    t0 = clock()
    if cfg.geometry == "G2":
        blended = alloc.soft_blend(w_pre, w_hjb, cfg.lambda_blend)
        scaled = alloc.post_process(
            blended, Sigma, cfg.vol_target, cfg.scale_clip, cfg.lev_cap, cfg.periods_per_year
        )
        flags += scaled.flags
        info["vol_scale"] = scaled.scale
        if alloc.scalings_conflict(s_tau, scaled.scale):
            flags.append("scalings_conflict")
        w_final = scaled.weights
    else:
        raw_step = alloc.mirror_simplex(w_prev, w_pre, cfg.turnover_target)
        pde_step = alloc.mirror_simplex(w_prev, w_hjb, cfg.turnover_target)
        if raw_step.saturated or pde_step.saturated:
            flags.append("mirror_saturated")
        w_final = alloc.soft_blend(raw_step.weights, pde_step.weights, cfg.lambda_blend, "simplex")

    baselines = {}
    if cfg.baselines:
        baselines = _baselines(cfg, R, mu, Sigma, J, frame, base_prev, flags)
    timings[4] = alloc_time + clock() - t0
    return _Step(w_pre, w_hjb, w_final, s_tau, frame, idx, flags, timings, info, baselines)


def _baselines(cfg, R, mu, Sigma, J, frame, base_prev, flags) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """RAW and CPCM-B weights for the classical allocators; failures hold previous weights."""
    n = R.shape[1]
    out = {}
    for name in BASELINES:
        try:
            if name == "Markowitz":
                raw = alloc.markowitz_closed(mu, Sigma, cfg.lambda_mv)
            elif name == "BL":
                P = np.linalg.pinv(J.T @ J) @ J.T
                F_mimic = R @ P.T
                Q = ewma_mean(F_mimic, cfg.halflife)
                omega = np.diag(np.diag(P @ (cfg.bl_tau * Sigma) @ P.T))
                inputs = alloc.BLInputs(cfg.lambda_mv, np.full(n, 1.0 / n), cfg.bl_tau, P, Q, omega)
                raw = alloc.markowitz_closed(alloc.black_litterman(inputs, Sigma), Sigma, cfg.lambda_mv)
            else:
                K = R.shape[0]
                q = alloc.entropy_pool(np.full(K, 1.0 / K), R, mu, cfg.ep_kl_budget, cfg.ep_floor)
                raw = alloc.markowitz_closed(q @ R, Sigma, cfg.lambda_mv)
            if cfg.geometry == "G2":
                raw_w = alloc.post_process(raw, Sigma, cfg.vol_target, cfg.scale_clip, cfg.lev_cap, cfg.periods_per_year).weights
                proj = alloc.project_budget_span(raw, frame)
                cpcm_w = alloc.post_process(proj, Sigma, cfg.vol_target, cfg.scale_clip, cfg.lev_cap, cfg.periods_per_year).weights
            else:
                raw_w = alloc.project_simplex(raw)
                cpcm_w = alloc.mirror_simplex(base_prev[f"{name}-CPCM"], raw, cfg.turnover_target).weights
        except (CPCMError, np.linalg.LinAlgError) as exc:
            flags.append(f"baseline_fallback:{name}:{type(exc).__name__}")
            raw_w, cpcm_w = base_prev[f"{name}-RAW"], base_prev[f"{name}-CPCM"]
        out[name] = (raw_w, cpcm_w)
    return out


# ---------------------------------------------------------------- driver loop


def _initial_weights(n: int) -> np.ndarray:
    return np.full(n, 1.0 / n)


def run_backtest_arrays(
    returns: np.ndarray,
    library: np.ndarray,
    cfg: BacktestConfig,
    dates=None,
    assets: list[str] | None = None,
) -> BacktestReport:
    """Run the pipeline on aligned in-memory panels (row ``t`` of both is observed at date ``t``)."""
    R_all = np.asarray(returns, dtype=float)
    X_all = np.asarray(library, dtype=float)
    if R_all.ndim != 2 or X_all.ndim != 2 or R_all.shape[0] != X_all.shape[0]:
        raise DataError("returns and library must be 2-D with the same number of rows")
    T, n = R_all.shape
    if T <= cfg.window:
        raise DataError(f"need more than window={cfg.window} rows, got {T}")
    if X_all.shape[1] < cfg.m:
        raise DataError("library has fewer columns than m")
    if not (np.all(np.isfinite(R_all)) and np.all(np.isfinite(X_all))):
        raise DataError("returns and library must be finite")
    dates = [str(d) for d in (dates if dates is not None else range(T))]
    assets = assets or [f"A{i}" for i in range(n)]

    starts = list(range(cfg.window, T, cfg.cadence))
    K = len(starts)
    w_prev = _initial_weights(n)
    frame_prev = None
    strategies = [cfg.label] + ([f"{b}-{kind}" for b in BASELINES for kind in ("RAW", "CPCM")] if cfg.baselines else [])
    base_prev = {s: _initial_weights(n) for s in strategies[1:]}
    W = {s: np.empty((K, n)) for s in strategies}
    w_pre = np.empty((K, n))
    w_hjb = np.empty((K, n))
    s_tau = np.empty(K)
    flags: list[list[str]] = []
    selections: list[list[int]] = []
    timings = np.zeros((K, len(COMPONENTS)))
    rebal_diag: dict[str, np.ndarray] = {
        key: np.full(K, np.nan)
        for key in ("g_value", "grassmann_dist", "max_principal_angle", "span_fidelity", "vol_scale")
    }
    oos = {s: np.empty(T - cfg.window) for s in strategies}

    for k, tau in enumerate(starts):
        # fresh buffers: BLAS kernels round differently on differently aligned views
        R = R_all[tau - cfg.window : tau].copy()
        X = X_all[tau - cfg.window : tau].copy()
        try:
            step = _rebalance(cfg, R, X, k, w_prev, frame_prev, base_prev)
        except (CPCMError, np.linalg.LinAlgError) as exc:
            logger.warning("rebalance %s failed (%s); holding previous weights", dates[tau], exc)
            step = _Step(
                w_prev, w_prev, w_prev, 1.0, frame_prev, selections[-1] if selections else [], [f"fallback:{type(exc).__name__}"],
                [0.0] * len(COMPONENTS), {}, {},
            )
        w_pre[k], w_hjb[k], s_tau[k] = step.w_pre, step.w_hjb, step.s_tau
        W[cfg.label][k] = step.w_final
        for name in BASELINES if cfg.baselines else ():
            raw_w, cpcm_w = step.baselines.get(name, (base_prev[f"{name}-RAW"], base_prev[f"{name}-CPCM"]))
            W[f"{name}-RAW"][k], W[f"{name}-CPCM"][k] = raw_w, cpcm_w
            base_prev[f"{name}-RAW"], base_prev[f"{name}-CPCM"] = raw_w, cpcm_w
        for key, value in step.diag.items():
            rebal_diag[key][k] = value
        flags.append(step.flags)
        selections.append(list(step.selection))
        timings[k] = step.timings
        w_prev, frame_prev = step.w_final, step.frame
        stop = min(tau + cfg.cadence, T)
        for s in strategies:
            oos[s][tau - cfg.window : stop - cfg.window] = R_all[tau:stop] @ W[s][k]

    metrics = {s: diag.perf_metrics(oos[s], W[s], cfg.periods_per_year) for s in strategies}
    main = oos[cfg.label]
    equity = np.cumprod(1.0 + main)
    gains = np.concatenate([[0.0], np.cumsum(main)])
    struct_flags = []
    if gains.size > cfg.defect_window + 1:
        defect = diag.martingale_defect(gains, cfg.defect_window)
        defect_value, struct_flags = defect.value, list(defect.flags)
    else:
        defect_value = float("nan")
        struct_flags.append("defect_window_exceeds_sample")
    lam = _risk_price_path(cfg, R_all, w_pre, starts, T)
    nov = diag.novikov_check(lam, 1.0 / cfg.periods_per_year, cfg.novikov_paths, cfg.seed)
    angles = [[a] for a in rebal_diag["max_principal_angle"]]
    structural = diag.StructuralDiag(
        defect_value, rebal_diag["span_fidelity"], angles, nov.moment, nov.defect_d, struct_flags + nov.flags
    )
    if equity.size >= 63:
        regimes = diag.regime_label(equity, 63)
    else:
        regimes = np.array([], dtype="<U9")
    trace = AllocationTrace(
        [dates[t] for t in starts], w_pre, w_hjb, W[cfg.label], s_tau, cfg.lambda_blend,
        cfg.geometry, cfg.variant, selections, flags,
    )
    return BacktestReport(
        cfg, list(assets), dates[cfg.window :], oos, W, metrics, trace, structural, regimes, rebal_diag, timings
    )


def _risk_price_path(cfg, R_all, w_pre, starts, T) -> np.ndarray:
    """Annualized Sharpe of each pre-allocation on its window, held over its segment."""
    lam = np.zeros(T - cfg.window)
    ppy = cfg.periods_per_year
    for k, tau in enumerate(starts):
        p = R_all[tau - cfg.window : tau] @ w_pre[k]
        sd = p.std(ddof=1)
        value = p.mean() / sd * np.sqrt(ppy) if sd > 0 else 0.0
        lam[tau - cfg.window : min(tau + cfg.cadence, T) - cfg.window] = value
    return lam[:, None]


def load_aligned(assets_csv: str | PathLike, library_csv: str | PathLike):
    """Returns and library panels aligned on the return dates."""
    returns = compute_returns(load_panel(assets_csv))
    lib_dates, lib_cols, lib_values, _ = read_wide_csv(library_csv)
    if len(lib_dates) != len(returns.dates) or np.any(lib_dates != returns.dates):
        raise DataError("library dates must match the asset return dates")
    return returns, lib_cols, lib_values


def run_backtest(assets_csv: str | PathLike, library_csv: str | PathLike, cfg: BacktestConfig) -> BacktestReport:
    returns, _, library = load_aligned(assets_csv, library_csv)
    dates = [str(d)[:10] for d in returns.dates]
    return run_backtest_arrays(returns.returns, library, cfg, dates, list(returns.assets))


# ---------------------------------------------------------------- grids


def expand_grid(base: BacktestConfig, **axes) -> list[BacktestConfig]:
    """Cartesian product of config overrides, e.g. ``expand_grid(cfg, m=[3, 7], seed=range(5))``."""
    if not axes:
        return [base]
    names = list(axes)
    return [replace(base, **dict(zip(names, combo))) for combo in itertools.product(*(list(axes[k]) for k in names))]


@dataclass
class GridResult:
    reports: list[BacktestReport]
    table: pd.DataFrame


GROUP_KEYS = ("screen_method", "filter_kind", "variant", "geometry", "m")
TABLE_METRICS = ("sharpe", "sortino", "max_dd", "avg_turnover")


def aggregate_table(reports: list[BacktestReport]) -> pd.DataFrame:
    """Mean and sd (ddof=1, 0 for single runs) of the CPCM metrics per configuration cell."""
    rows = []
    for rep in reports:
        row = {key: getattr(rep.config, key) for key in GROUP_KEYS}
        met = rep.metrics[rep.main]
        row.update({name: getattr(met, name) for name in TABLE_METRICS})
        rows.append(row)
    frame = pd.DataFrame(rows, columns=list(GROUP_KEYS) + list(TABLE_METRICS))
    grouped = frame.groupby(list(GROUP_KEYS), sort=True)
    out = grouped[list(TABLE_METRICS)].mean().add_suffix("_mean")
    sd = grouped[list(TABLE_METRICS)].std(ddof=1).fillna(0.0).add_suffix("_sd")
    out = out.join(sd)
    out["runs"] = grouped.size()
    ordered = [c for name in TABLE_METRICS for c in (f"{name}_mean", f"{name}_sd")] + ["runs"]
    return out[ordered].reset_index()


def run_grid(assets_csv, library_csv, configs: list[BacktestConfig]) -> GridResult:
    if not configs:
        raise ConfigError("empty grid")
    returns, _, library = load_aligned(assets_csv, library_csv)
    dates = [str(d)[:10] for d in returns.dates]
    reports = [run_backtest_arrays(returns.returns, library, cfg, dates, list(returns.assets)) for cfg in configs]
    return GridResult(reports, aggregate_table(reports))


def run_grid_arrays(returns, library, configs: list[BacktestConfig], dates=None) -> GridResult:
    if not configs:
        raise ConfigError("empty grid")
    reports = [run_backtest_arrays(returns, library, cfg, dates) for cfg in configs]
    return GridResult(reports, aggregate_table(reports))


# ---------------------------------------------------------------- output


def _clean(value):
    if isinstance(value, float) and not np.isfinite(value):
        return None
    if isinstance(value, (np.floating,)):
        return _clean(float(value))
    if isinstance(value, dict):
        return {k: _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    return value


def emit_report(report: BacktestReport, out_dir: str | PathLike) -> dict[str, Path]:
    """Write ``metrics.json``, ``weights.csv``, ``diagnostics.csv`` and ``timings.csv`` (long format)."""
    target = Path(out_dir)
    target.mkdir(parents=True, exist_ok=True)
    paths = {name: target / name for name in ("metrics.json", "weights.csv", "diagnostics.csv", "timings.csv")}
    trace = report.trace
    struct = report.structural
    labels, counts = np.unique(report.regimes, return_counts=True)
    summary = {
        "config": report.config.to_dict(),
        "mainStrategy": report.main,
        "metrics": {name: m.to_dict() for name, m in report.metrics.items()},
        "structural": {
            "martingaleDefect": struct.martingale_defect,
            "meanSpanFidelity": float(np.nanmean(struct.span_fidelity)) if np.any(np.isfinite(struct.span_fidelity)) else None,
            "novikovMoment": struct.novikov_moment,
            "defectD": struct.defect_d,
            "flags": struct.flags,
        },
        "regimeCounts": {str(k): int(v) for k, v in zip(labels, counts)},
        "rebalances": len(trace.dates),
        "flags": trace.flags,
        "selections": trace.selections,
    }
    paths["metrics.json"].write_text(json.dumps(_clean(summary), indent=2, sort_keys=True) + "\n")

    rows = []
    for k, date in enumerate(trace.dates):
        for i, asset in enumerate(report.assets):
            rows.append((date, report.main, asset, trace.w_pre[k, i], trace.w_hjb[k, i], trace.w_final[k, i], trace.s_tau[k]))
            for name, W in report.weights.items():
                if name != report.main:
                    rows.append((date, name, asset, W[k, i], W[k, i], W[k, i], 1.0))
    pd.DataFrame(rows, columns=["date", "strategy", "asset", "w_pre", "w_hjb", "w_final", "s_tau"]).to_csv(
        paths["weights.csv"], index=False, float_format="%.17g"
    )

    diag_rows = []
    for k, date in enumerate(trace.dates):
        diag_rows.append((date, "s_tau", trace.s_tau[k]))
        for key, series in report.rebalance_diag.items():
            diag_rows.append((date, key, series[k]))
    for name, series in report.returns.items():
        for date, r in zip(report.oos_dates, series):
            diag_rows.append((date, f"return:{name}", r))
    offset = len(report.oos_dates) - len(report.regimes)
    for j, label in enumerate(report.regimes):
        diag_rows.append((report.oos_dates[offset + j], "regime", label))
    pd.DataFrame(diag_rows, columns=["date", "metric", "value"]).to_csv(
        paths["diagnostics.csv"], index=False, float_format="%.17g"
    )

    time_rows = [
        (date, comp, report.timings[k, c]) for k, date in enumerate(trace.dates) for c, comp in enumerate(COMPONENTS)
    ]
    pd.DataFrame(time_rows, columns=["date", "component", "seconds"]).to_csv(paths["timings.csv"], index=False)
    return paths


def emit_grid(result: GridResult, out_dir: str | PathLike) -> Path:
    target = Path(out_dir)
    target.mkdir(parents=True, exist_ok=True)
    path = target / "grid.csv"
    result.table.to_csv(path, index=False, float_format="%.17g")
    return path
