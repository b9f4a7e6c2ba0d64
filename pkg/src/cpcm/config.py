"""JSON configuration documents: one object per module, strict about keys."""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from os import PathLike
from pathlib import Path

from .backtest import BacktestConfig, expand_grid
from .drivermap import NeuralMapSpec
from .errors import ConfigError
from .filtering import FilterConfig
from .screen import ScreenConfig

SECTIONS = ("backtest", "screen", "filter", "drivermap", "synth", "grid", "diag")


@dataclass(frozen=True)
class SynthConfig:
    n: int = 10
    m: int = 3
    T: int = 2000
    periods_per_year: int = 252
    driver_halflife_years: float = 0.25
    loading_scale: float = 2.0
    idio_vol: float = 0.20
    driver_obs_vol: float = 0.05
    n_noise: int = 12
    start: str = "2000-01-03"
    seed: int = 0


@dataclass(frozen=True)
class DiagConfig:
    window: int = 63
    periods_per_year: int = 252
    null_sims: int = 200
    seed: int = 0


@dataclass(frozen=True)
class GridConfig:
    axes: dict = field(default_factory=dict)
    seeds: tuple[int, ...] = (0,)


def build(cls, data: dict | None, where: str):
    """Instantiate dataclass ``cls`` from ``data``; unknown keys raise ConfigError."""
    data = {} if data is None else data
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a JSON object")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    kwargs = {}
    for key, value in data.items():
        hint = hints[key]
        origin = typing.get_origin(hint)
        if origin is tuple or (origin is typing.Union and any(typing.get_origin(a) is tuple for a in typing.get_args(hint))):
            value = tuple(value) if isinstance(value, list) else value
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def load_document(path: str | PathLike | None) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a JSON object")
    unknown = sorted(set(doc) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    return doc


def filter_section(doc: dict) -> tuple[str, FilterConfig]:
    """The filter section may carry ``kind`` (ekf|pf) next to the FilterConfig fields."""
    section = dict(doc.get("filter") or {})
    kind = section.pop("kind", None)
    if kind is not None and kind not in ("ekf", "pf"):
        raise ConfigError("filter.kind must be ekf or pf")
    return kind or "ekf", build(FilterConfig, section, "filter")


def backtest_config(doc: dict, seed: int | None = None) -> BacktestConfig:
    flat = dict(doc.get("backtest") or {})
    for nested in ("screen", "filter", "neural"):
        if nested in flat:
            raise ConfigError(f"put {nested} settings in their own top-level section")
    screen = build(ScreenConfig, doc.get("screen"), "screen")
    kind, filt = filter_section(doc)
    neural_section = dict(doc.get("drivermap") or {})
    if "hidden" in neural_section and neural_section["hidden"] is not None:
        neural_section["hidden"] = tuple(neural_section["hidden"])
    neural = build(NeuralMapSpec, neural_section, "drivermap")
    if "screen" in doc and "method" in doc["screen"]:
        flat.setdefault("screen_method", screen.method)
    if "screen" in doc and "m" in doc["screen"]:
        flat.setdefault("m", screen.m)
    if "filter" in doc and "kind" in doc["filter"]:
        flat.setdefault("filter_kind", kind)
    if seed is not None:
        flat["seed"] = seed
    known = {f.name for f in dataclasses.fields(BacktestConfig)}
    unknown = sorted(set(flat) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in backtest: {', '.join(unknown)}")
    if "scale_clip" in flat:
        flat["scale_clip"] = tuple(flat["scale_clip"])
    try:
        return BacktestConfig(screen=screen, filter=filt, neural=neural, **flat)
    except TypeError as exc:
        raise ConfigError(f"backtest: {exc}") from exc


def grid_configs(doc: dict, seed: int | None = None) -> list[BacktestConfig]:
    base = backtest_config(doc, seed)
    grid = build(GridConfig, doc.get("grid"), "grid")
    known = {f.name for f in dataclasses.fields(BacktestConfig)}
    bad = sorted(set(grid.axes) - known)
    if bad:
        raise ConfigError(f"unknown grid axis: {', '.join(bad)}")
    seeds = (seed,) if seed is not None else grid.seeds
    return expand_grid(base, **grid.axes, seed=list(seeds))
