"""Price ingestion, returns and robust in-window moments."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from os import PathLike

import numpy as np
import pandas as pd

from .errors import DataError

logger = logging.getLogger(__name__)

DEFAULT_WINSOR_Q = 0.01
DEFAULT_HALFLIFE = 21.0


@dataclass(frozen=True)
class PricePanel:
    dates: np.ndarray  # datetime64[D], strictly increasing
    assets: list[str]
    prices: np.ndarray  # T x n, all > 0
    dropped: int = 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.prices.shape


@dataclass(frozen=True)
class ReturnPanel:
    dates: np.ndarray
    assets: list[str]
    returns: np.ndarray  # T x n simple returns

    @property
    def shape(self) -> tuple[int, int]:
        return self.returns.shape

    def window(self, start: int, stop: int) -> "ReturnPanel":
        return ReturnPanel(self.dates[start:stop], self.assets, self.returns[start:stop])


@dataclass(frozen=True)
class RobustMoments:
    mean: np.ndarray
    cov: np.ndarray
    window: tuple[int, int]
    shrinkage: float


def read_wide_csv(path: str | PathLike) -> tuple[np.ndarray, list[str], np.ndarray, int]:
    """Read a wide CSV with a leading ``date`` column.

    Returns ``(dates, columns, values, dropped)`` where rows containing any
    empty cell have been removed and counted in ``dropped``.
    """
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except FileNotFoundError:
        raise
    except Exception as exc:  # pandas raises several parser error types
        raise DataError(f"cannot parse {path}: {exc}") from exc
    if frame.shape[1] < 2 or frame.columns[0].strip().lower() != "date":
        raise DataError(f"{path}: first column must be 'date' followed by series columns")

    cells = frame.apply(lambda col: col.str.strip())
    complete = (cells != "").all(axis=1)
    dropped = int((~complete).sum())
    cells = cells[complete]
    if dropped:
        logger.info("%s: dropped %d incomplete rows", path, dropped)

    try:
        dates = pd.to_datetime(cells.iloc[:, 0], format="%Y-%m-%d").to_numpy(dtype="datetime64[D]")
    except (ValueError, TypeError) as exc:
        raise DataError(f"{path}: unparseable date ({exc})") from exc
    try:
        values = cells.iloc[:, 1:].astype(float).to_numpy()
    except ValueError as exc:
        raise DataError(f"{path}: non-numeric cell ({exc})") from exc
    if len(dates) > 1 and np.any(np.diff(dates) <= np.timedelta64(0, "D")):
        raise DataError(f"{path}: dates must be strictly increasing")
    columns = [c.strip() for c in frame.columns[1:]]
    return dates, columns, values, dropped


def write_wide_csv(path: str | PathLike, dates, columns, values, fmt: str = "%.17g") -> None:
    """Write a block in the same dialect that :func:`read_wide_csv` accepts."""
    frame = pd.DataFrame(np.asarray(values, dtype=float), columns=list(columns))
    frame.insert(0, "date", pd.to_datetime(np.asarray(dates)).strftime("%Y-%m-%d"))
    frame.to_csv(path, index=False, float_format=fmt)


def load_panel(path: str | PathLike) -> PricePanel:
    """Load a wide CSV of positive prices into a :class:`PricePanel`."""
    dates, assets, prices, dropped = read_wide_csv(path)
    if prices.shape[0] < 2:
        raise DataError(f"{path}: need at least 2 complete rows, got {prices.shape[0]}")
    if not np.all(np.isfinite(prices)):
        raise DataError(f"{path}: non-finite price")
    if np.any(prices <= 0):
        raise DataError(f"{path}: non-positive price")
    return PricePanel(dates, assets, prices, dropped)


def compute_returns(panel: PricePanel) -> ReturnPanel:
    prices = np.asarray(panel.prices, dtype=float)
    if prices.shape[0] < 2:
        raise DataError("need at least 2 price rows to form returns")
    returns = prices[1:] / prices[:-1] - 1.0
    return ReturnPanel(np.asarray(panel.dates)[1:], list(panel.assets), returns)


def cumulate(returns: np.ndarray, start: float | np.ndarray = 1.0) -> np.ndarray:
    """Inverse of :func:`compute_returns`: price path starting at ``start``."""
    returns = np.asarray(returns, dtype=float)
    growth = np.cumprod(1.0 + returns, axis=0)
    first = np.ones((1,) + returns.shape[1:])
    return np.asarray(start) * np.concatenate([first, growth], axis=0)


def _as_2d(x) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise DataError("expected a T x n matrix")
    return arr


def winsorize(x, q: float = DEFAULT_WINSOR_Q) -> np.ndarray:
    """Clip each column to its empirical ``[q, 1-q]`` quantiles (linear rule)."""
    if not 0.0 < q < 0.5:
        raise DataError(f"winsorize quantile must lie in (0, 0.5), got {q}")
    arr = _as_2d(x)
    if arr.shape[0] < 2:
        raise DataError("winsorize needs at least 2 rows")
    lo = np.quantile(arr, q, axis=0, method="linear")
    hi = np.quantile(arr, 1.0 - q, axis=0, method="linear")
    out = np.clip(arr, lo, hi)
    return out.reshape(np.shape(x)) if np.ndim(x) == 1 else out


def ewma_weights(length: int, halflife: float) -> np.ndarray:
    """Normalized weights, oldest first; the newest observation has the largest weight."""
    if not halflife > 0:
        raise DataError(f"halflife must be positive, got {halflife}")
    decay = 2.0 ** (-1.0 / halflife)
    raw = decay ** np.arange(length - 1, -1, -1, dtype=float)
    return raw / raw.sum()


def ewma_mean(x, halflife: float = DEFAULT_HALFLIFE) -> np.ndarray:
    arr = _as_2d(x)
    if arr.shape[0] == 0:
        raise DataError("ewma_mean of an empty window")
    return ewma_weights(arr.shape[0], halflife) @ arr


def shrink_cov(x, return_shrinkage: bool = False, min_shrinkage: float = 1e-6):
    """Ledoit-Wolf shrinkage of the sample covariance toward ``tr(S)/n * I``.

    ``S`` is the maximum-likelihood covariance (divisor ``T``) of the demeaned
    sample. The intensity is the usual plug-in ratio clipped to ``[0, 1]``.
    When ``S`` itself is singular the intensity is floored at ``min_shrinkage``
    so the result stays positive definite (tiny samples can give a zero ratio).
    """
    arr = _as_2d(x)
    t, n = arr.shape
    if t < 2:
        raise DataError("shrink_cov needs at least 2 rows")
    xc = arr - arr.mean(axis=0)
    s = xc.T @ xc / t
    mu = np.trace(s) / n
    target = mu * np.eye(n)
    d2 = np.sum((s - target) ** 2)
    if d2 <= 0.0:
        delta = 0.0
    else:
        # average squared deviation of the rank-one outer products from S
        outer_sq = np.einsum("ti,tj->ij", xc**2, xc**2)
        b2_bar = (outer_sq.sum() / t - np.sum(s**2)) / t
        delta = float(np.clip(b2_bar / d2, 0.0, 1.0))
    if mu > 0 and np.linalg.eigvalsh(s)[0] <= 1e-12 * mu:
        delta = max(delta, min_shrinkage)
    cov = (1.0 - delta) * s + delta * target
    cov = 0.5 * (cov + cov.T)
    return (cov, delta) if return_shrinkage else cov


def robust_moments(
    x,
    q: float = DEFAULT_WINSOR_Q,
    halflife: float = DEFAULT_HALFLIFE,
    window: tuple[int, int] | None = None,
) -> RobustMoments:
    """Winsorize, then EWMA mean and shrunk covariance on the clipped sample."""
    clipped = winsorize(x, q)
    cov, delta = shrink_cov(clipped, return_shrinkage=True)
    span = window if window is not None else (0, clipped.shape[0])
    return RobustMoments(ewma_mean(clipped, halflife), cov, span, delta)
