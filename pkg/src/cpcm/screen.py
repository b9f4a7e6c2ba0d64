"""Common-driver screens.

Three selectors pick ``m`` columns of a candidate library:

* ``combo``: greedy forward selection minimizing Psi, the mean absolute
  pairwise correlation of asset residuals after regressing on the selection.
* ``corr``: marginal correlation breadth/strength ranking with a redundancy cap.
* ``bayes``: per-asset Gaussian BIC of a one-regressor fit, summed over assets.

Library columns and asset returns are standardized inside the window before
anything is scored, so every screen is invariant to affine rescaling of
either input.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.cluster.vq import kmeans2

from .errors import ConfigError, DataError, NumericalError

METHODS = ("combo", "corr", "bayes")


@dataclass(frozen=True)
class ScreenConfig:
    m: int = 3
    tau: float = 0.3
    rho_max: float = 0.9
    epsilon: float = 0.05
    alpha: float = 1.0
    beta: float = 0.1
    gamma: float = 0.1
    kappa_max: float = 1e4
    eta: float = 1e-3
    bins: int = 5
    ridge: float = 0.0
    min_cell: int = 10
    method: str = "combo"
    seed: int = 0

    def __post_init__(self):
        checks = [
            (self.m >= 1, "m must be >= 1"),
            (self.tau > 0, "tau must be positive"),
            (0 < self.rho_max <= 1, "rho_max must lie in (0, 1]"),
            (self.epsilon >= 0, "epsilon must be non-negative"),
            (min(self.alpha, self.beta, self.gamma) >= 0, "J weights must be non-negative"),
            (self.kappa_max > 1, "kappa_max must exceed 1"),
            (self.eta > 0, "eta must be positive"),
            (self.bins >= 2, "bins must be >= 2"),
            (self.ridge >= 0, "ridge must be non-negative"),
            (self.min_cell >= 1, "min_cell must be >= 1"),
            (self.method in METHODS, f"method must be one of {METHODS}"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)


@dataclass
class DriverSelection:
    indices: list[int]
    psi_path: list[float]
    g_value: float
    j_value: float
    kappa: float
    method: str
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "indices": [int(i) for i in self.indices],
            "psiPath": [float(v) for v in self.psi_path],
            "Gvalue": float(self.g_value),
            "Jvalue": float(self.j_value),
            "kappa": float(self.kappa),
            "method": self.method,
            "flags": list(self.flags),
        }


def standardize(x, name: str = "column") -> np.ndarray:
    """Center and scale each column to unit (population) variance."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    centered = arr - arr.mean(axis=0)
    scale = np.sqrt(np.mean(centered**2, axis=0))
    tiny = 1e-12 * np.maximum(1.0, np.abs(arr).max(axis=0))
    if np.any(scale <= tiny):
        bad = np.flatnonzero(scale <= tiny).tolist()
        raise DataError(f"zero-variance {name}(s) at index {bad}")
    return centered / scale


def _returns_matrix(returns) -> np.ndarray:
    arr = getattr(returns, "returns", returns)
    arr = np.asarray(arr, dtype=float)
    if arr.ndim != 2:
        raise DataError("returns must be a T x n matrix")
    return arr


def _validate(returns, library) -> tuple[np.ndarray, np.ndarray]:
    y = _returns_matrix(returns)
    lib = np.asarray(library, dtype=float)
    if lib.ndim == 1:
        lib = lib[:, None]
    if lib.shape[0] != y.shape[0]:
        raise DataError(f"library has {lib.shape[0]} rows, returns have {y.shape[0]}")
    return y, lib


def residuals(returns, library, S, ridge: float = 0.0) -> np.ndarray:
    """Residuals of the centered returns after ridge-OLS on standardized ``library[:, S]``."""
    y, lib = _validate(returns, library)
    S = list(S)
    t = y.shape[0]
    if t <= len(S) + 2:
        raise DataError(f"window of {t} rows too short for {len(S)} regressors")
    yc = y - y.mean(axis=0)
    if not S:
        return yc
    x = standardize(lib[:, S], "library column")
    if ridge > 0:
        coef = np.linalg.solve(x.T @ x + ridge * np.eye(len(S)), x.T @ yc)
    else:
        coef = np.linalg.lstsq(x, yc, rcond=None)[0]
    return yc - x @ coef


def _abs_corr_offdiag_mean(resid: np.ndarray) -> float:
    n = resid.shape[1]
    scale = np.sqrt(np.mean(resid**2, axis=0))
    ref = max(1.0, np.abs(resid).max()) * 1e-13
    if np.any(scale <= ref):
        raise NumericalError("a residual column has zero variance (degenerate fit)")
    z = resid / scale
    corr = z.T @ z / resid.shape[0]
    if n < 2:
        return 0.0
    return float((np.abs(corr).sum() - np.abs(np.diag(corr)).sum()) / (n * (n - 1)))


def psi_residual(returns, library, S, ridge: float = 0.0) -> float:
    """Mean absolute off-diagonal residual correlation after conditioning on ``S``."""
    return _abs_corr_offdiag_mean(residuals(returns, library, S, ridge))


def g_cov(returns, library, S, ridge: float = 0.0) -> float:
    """Covariance-form screening objective: sum over pairs of |residual covariance|.

    Returns are standardized first, so each term is on the correlation scale.
    """
    y, lib = _validate(returns, library)
    resid = residuals(standardize(y, "asset"), lib, S, ridge)
    cov = resid.T @ resid / resid.shape[0]
    return float(np.abs(np.triu(cov, 1)).sum())


def n_pairs(n: int) -> int:
    return n * (n - 1) // 2


def coverage_matrix(returns, library, S, tau: float) -> np.ndarray:
    """Boolean ``n x |S|`` matrix of ``|corr(asset, driver)| >= tau``."""
    y, lib = _validate(returns, library)
    corr = standardize(y, "asset").T @ standardize(lib[:, list(S)], "library column") / y.shape[0]
    return np.abs(corr) >= tau


def surrogate_J(returns, library, S, cfg: ScreenConfig) -> float:
    """``alpha * G_cov - beta * total coverage + gamma * total pairwise overlap``."""
    S = list(S)
    if not S:
        raise DataError("surrogate_J needs a non-empty selection")
    covered = coverage_matrix(returns, library, S, cfg.tau).astype(float)
    coverage = covered.sum()
    joint = covered.T @ covered  # joint[k, l] = assets covered by both
    overlap = np.triu(joint, 1).sum()
    return float(cfg.alpha * g_cov(returns, library, S, cfg.ridge) - cfg.beta * coverage + cfg.gamma * overlap)


def event_deviation(events: np.ndarray, labels: np.ndarray, min_count: int = 10) -> float:
    """Sum over cells and asset pairs of ``|P(Ei, Ej | C) - P(Ei | C) P(Ej | C)|``."""
    events = np.asarray(events, dtype=float)
    labels = np.asarray(labels)
    total = 0.0
    for cell in np.unique(labels):
        e = events[labels == cell]
        if e.shape[0] < min_count:
            continue
        p = e.mean(axis=0)
        joint = e.T @ e / e.shape[0]
        total += float(np.abs(np.triu(joint - np.outer(p, p), 1)).sum())
    return total


def driver_cells(x: np.ndarray, bins: int, seed: int) -> np.ndarray:
    """k-means++ partition of driver space (50 Lloyd iterations)."""
    rng = np.random.default_rng(seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        _, labels = kmeans2(x, bins, iter=50, minit="++", seed=rng)
    return labels


def event_G(returns, library, S, cfg: ScreenConfig) -> float:
    """Event-form screening objective on a k-means partition of the selected drivers.

    Events are ``A_i > median(A_i)``.
    """
    S = list(S)
    if not S:
        raise DataError("event_G needs a non-empty selection")
    y, lib = _validate(returns, library)
    x = standardize(lib[:, S], "library column")
    labels = driver_cells(x, cfg.bins, cfg.seed)
    events = y > np.median(y, axis=0)
    return event_deviation(events, labels, cfg.min_cell)


def loading_condition(returns, library, S) -> float:
    """``cond(B^T B)`` for the OLS loadings of returns on standardized ``library[:, S]``.

    Returns ``inf`` when the loadings are rank deficient.
    """
    y, lib = _validate(returns, library)
    S = list(S)
    x = standardize(lib[:, S], "library column")
    coef = np.linalg.lstsq(x, y - y.mean(axis=0), rcond=None)[0]  # |S| x n, i.e. B^T
    gram = coef @ coef.T
    sv = np.linalg.svd(gram, compute_uv=False)
    if sv[-1] <= 1e-12 * sv[0] or sv[0] == 0.0:
        return float("inf")
    return float(sv[0] / sv[-1])


def _finish(returns, library, indices, psi_path, cfg: ScreenConfig, method: str, flags) -> DriverSelection:
    y, _ = _validate(returns, library)
    if indices:
        g = g_cov(returns, library, indices, cfg.ridge)
        j = surrogate_J(returns, library, indices, cfg)
        kappa = loading_condition(returns, library, indices)
    else:
        g = g_cov(returns, library, [], cfg.ridge)
        j, kappa = float("nan"), float("nan")
    if g > cfg.m * cfg.epsilon:
        flags.append("G_exceeds_m_epsilon")
    return DriverSelection(list(indices), psi_path, g, j, kappa, method, flags)


def greedy_combo(returns, library, cfg: ScreenConfig, tol: float = 1e-12) -> DriverSelection:
    """Forward selection maximizing the Psi reduction at each step.

    ``psi_path[0]`` is Psi of the empty set and ``psi_path[k]`` the value after
    the k-th addition. Selection stops early, with a flag, once no candidate
    reduces Psi by more than ``tol``.
    """
    y, lib = _validate(returns, library)
    n_cand = lib.shape[1]
    if n_cand < cfg.m:
        raise DataError(f"library has {n_cand} candidates, fewer than m={cfg.m}")
    y = standardize(y, "asset")
    lib = standardize(lib, "library column")
    chosen: list[int] = []
    path = [psi_residual(y, lib, [], cfg.ridge)]
    flags: list[str] = []
    while len(chosen) < cfg.m:
        best, best_psi = -1, np.inf
        for j in range(n_cand):
            if j in chosen:
                continue
            try:
                value = psi_residual(y, lib, chosen + [j], cfg.ridge)
            except NumericalError:
                continue
            if value < best_psi - tol:  # strict: ties keep the lower index
                best, best_psi = j, value
        if best < 0 or path[-1] - best_psi <= tol:
            flags.append("no_positive_reduction")
            break
        chosen.append(best)
        path.append(best_psi)
    return _finish(returns, library, chosen, path, cfg, "combo", flags)


def _psi_along(y, lib, order, ridge) -> list[float]:
    path = [psi_residual(y, lib, [], ridge)]
    for k in range(1, len(order) + 1):
        try:
            path.append(psi_residual(y, lib, order[:k], ridge))
        except NumericalError:
            path.append(float("nan"))
    return path


def corr_screen(returns, library, cfg: ScreenConfig) -> DriverSelection:
    """Breadth (Repetition) then Strength ranking, skipping redundant candidates."""
    y, lib = _validate(returns, library)
    zy = standardize(y, "asset")
    zx = standardize(lib, "library column")
    t = y.shape[0]
    gamma = np.abs(zy.T @ zx / t)  # n x M
    hit = gamma >= cfg.tau
    repetition = hit.sum(axis=0)
    strength = (gamma * hit).sum(axis=0)
    idx = np.arange(lib.shape[1])
    order = np.lexsort((idx, -strength, -repetition))
    lib_corr = np.abs(zx.T @ zx / t)
    accepted: list[int] = []
    for j in order:
        if all(lib_corr[j, k] <= cfg.rho_max for k in accepted):
            accepted.append(int(j))
            if len(accepted) == cfg.m:
                break
    flags = [] if len(accepted) == cfg.m else ["fewer_than_m_survived"]
    return _finish(returns, library, accepted, _psi_along(zy, zx, accepted, cfg.ridge), cfg, "corr", flags)


def bic_scores(returns, library, sigma2_floor: float = 1e-12) -> np.ndarray:
    """Summed per-asset BIC of ``r_i = a + b x + u`` for every candidate ``x``."""
    y, lib = _validate(returns, library)
    t = y.shape[0]
    if t < 4:
        raise DataError("bic_screen needs at least 4 rows")
    zx = standardize(lib, "candidate")
    yc = y - y.mean(axis=0)
    var_y = np.mean(yc**2, axis=0)  # n
    cov_xy = yc.T @ zx / t  # n x M; candidates have unit variance
    sigma2 = np.maximum(var_y[:, None] - cov_xy**2, sigma2_floor)
    loglik = -0.5 * t * (np.log(2.0 * np.pi * sigma2) + 1.0)
    bic = -2.0 * loglik + 2.0 * np.log(t)
    return bic.sum(axis=0)


def bic_screen(returns, library, cfg: ScreenConfig) -> DriverSelection:
    scores = bic_scores(returns, library)
    idx = np.arange(scores.size)
    order = [int(j) for j in np.lexsort((idx, scores))[: cfg.m]]
    y, lib = _validate(returns, library)
    path = _psi_along(standardize(y, "asset"), standardize(lib, "candidate"), order, cfg.ridge)
    return _finish(returns, library, order, path, cfg, "bayes", [])


_SCREENS = {"combo": greedy_combo, "corr": corr_screen, "bayes": bic_screen}


def run_screen(returns, library, cfg: ScreenConfig, method: str | None = None) -> DriverSelection:
    method = method or cfg.method
    if method not in _SCREENS:
        raise ConfigError(f"unknown screen {method!r}")
    return _SCREENS[method](returns, library, cfg)


@dataclass
class GuardResult:
    chosen_m: int
    m_grid: list[int]
    kappa: list[float]
    delta_g: list[float]
    selections: list[DriverSelection]
    flagged: bool


def condition_guard(returns, library, cfg: ScreenConfig, m_grid, method: str | None = None) -> GuardResult:
    """Pick the smallest ``m`` whose marginal screening gain stalls or whose loadings are ill-conditioned.

    ``delta_g`` is measured per asset pair so ``eta`` does not depend on ``n``.
    The first grid point is compared against the empty selection.
    """
    m_grid = [int(m) for m in m_grid]
    if not m_grid or any(b <= a for a, b in zip(m_grid, m_grid[1:])):
        raise ConfigError("m_grid must be non-empty and strictly increasing")
    y, lib = _validate(returns, library)
    pairs = max(1, n_pairs(y.shape[1]))
    prev_g = g_cov(y, lib, [], cfg.ridge) / pairs
    kappas, deltas, selections = [], [], []
    chosen = None
    for m in m_grid:
        sel = run_screen(y, lib, replace(cfg, m=m), method)
        selections.append(sel)
        g = sel.g_value / pairs
        kappa = loading_condition(y, lib, sel.indices) if sel.indices else float("inf")
        kappas.append(kappa)
        deltas.append(prev_g - g)
        prev_g = g
        if chosen is None and (deltas[-1] < cfg.eta or kappa > cfg.kappa_max):
            chosen = m
    flagged = chosen is None
    return GuardResult(m_grid[-1] if flagged else chosen, m_grid, kappas, deltas, selections, flagged)


def g_block_bootstrap_se(
    returns, library, S, ridge: float = 0.0, block: int | None = None, n_boot: int = 200, seed: int = 0
) -> float:
    """Moving-block bootstrap standard error of the covariance-form objective."""
    y, lib = _validate(returns, library)
    t = y.shape[0]
    block = block or max(1, int(np.ceil(t ** (1.0 / 3.0))))
    rng = np.random.default_rng(seed)
    n_blocks = int(np.ceil(t / block))
    reps = np.empty(n_boot)
    for b in range(n_boot):
        starts = rng.integers(0, t - block + 1, size=n_blocks)
        rows = (starts[:, None] + np.arange(block)).ravel()[:t]
        reps[b] = g_cov(y[rows], lib[rows], S, ridge)
    return float(reps.std(ddof=1))
