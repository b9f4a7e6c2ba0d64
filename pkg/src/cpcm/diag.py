"""Performance and structural diagnostics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import ndtr

from .alloc import principal_angles as _angles
from .errors import DataError
from .synth import rng_stream


# ---------------------------------------------------------------- performance


@dataclass
class PerfMetrics:
    sharpe: float
    sortino: float
    ann_vol: float
    cum_return: float
    max_dd: float
    avg_turnover: float
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "sharpe": self.sharpe,
            "sortino": self.sortino,
            "annVol": self.ann_vol,
            "cumReturn": self.cum_return,
            "maxDD": self.max_dd,
            "avgTurnover": self.avg_turnover,
            "flags": list(self.flags),
        }


def turnover_series(weights) -> np.ndarray:
    """Half L1 change between consecutive weight rows."""
    w = np.atleast_2d(np.asarray(weights, dtype=float))
    if w.shape[0] < 2:
        return np.zeros(0)
    return 0.5 * np.abs(np.diff(w, axis=0)).sum(axis=1)


def max_drawdown(returns) -> float:
    equity = np.concatenate([[1.0], np.cumprod(1.0 + np.asarray(returns, dtype=float))])
    peak = np.maximum.accumulate(equity)
    return float(min(0.0, np.min(equity / peak - 1.0)))


def perf_metrics(returns, weights=None, periods_per_year: float = 252.0) -> PerfMetrics:
    """Sharpe, Sortino (downside threshold 0), vol, cumulative return, drawdown, turnover."""
    r = np.asarray(returns, dtype=float).ravel()
    if r.size < 2:
        raise DataError("need at least two returns")
    flags = []
    ann = np.sqrt(periods_per_year)
    mean, std = r.mean(), r.std(ddof=1)
    if std > 1e-12 * abs(mean):
        sharpe = float(mean / std * ann)
    else:
        sharpe = float("nan")
        flags.append("zero_std")
    downside = np.sqrt(np.mean(np.minimum(r, 0.0) ** 2))
    if downside > 0:
        sortino = float(mean / downside * ann)
    else:
        sortino = float("nan")
        flags.append("no_downside")
    turnover = turnover_series(weights) if weights is not None else np.zeros(0)
    return PerfMetrics(
        sharpe=sharpe,
        sortino=sortino,
        ann_vol=float(std * ann),
        cum_return=float(np.prod(1.0 + r) - 1.0),
        max_dd=max_drawdown(r),
        avg_turnover=float(turnover.mean()) if turnover.size else 0.0,
        flags=flags,
    )


# ---------------------------------------------------------------- martingale defect


@dataclass
class MartingaleDefect:
    value: float
    per_window: np.ndarray
    window: int
    flags: list[str] = field(default_factory=list)


def martingale_defect(p, window: int = 63, level: bool = False) -> MartingaleDefect:
    """Average fitted drift of a value path over rolling windows.

    Each window regresses the increment ``p_t - p_{t-1}`` on ``p_{t-1}`` by OLS
    and scores the mean of ``|a + b p_{t-1}|`` over the window, so a martingale
    scores near zero. ``level=True`` instead regresses ``p_t`` on ``p_{t-1}``
    and scores ``|a + b p_t|`` literally.
    """
    p = np.asarray(p, dtype=float).ravel()
    if window < 10:
        raise DataError("window must be at least 10")
    if p.size < window + 1:
        raise DataError("series shorter than one window")
    if not np.all(np.isfinite(p)):
        raise DataError("non-finite value path")
    x = p[:-1]
    y = p[1:] if level else np.diff(p)
    if np.ptp(p) == 0.0:
        return MartingaleDefect(0.0, np.zeros(x.size - window + 1), window, ["constant_series"])

    xs = sliding_window_view(x, window)
    ys = sliding_window_view(y, window)
    xm = xs.mean(axis=1)
    ym = ys.mean(axis=1)
    xc = xs - xm[:, None]
    sxx = np.einsum("ij,ij->i", xc, xc)
    sxy = np.einsum("ij,ij->i", xc, ys - ym[:, None])
    flags = []
    degenerate = sxx <= 1e-14 * np.maximum(1.0, np.einsum("ij,ij->i", xs, xs))
    b = np.where(degenerate, 0.0, sxy / np.where(degenerate, 1.0, sxx))
    a = ym - b * xm
    if degenerate.any():
        flags.append("degenerate_window")
    regress_on = sliding_window_view(p[1:], window) if level else xs
    per_window = np.abs(a[:, None] + b[:, None] * regress_on).mean(axis=1)
    return MartingaleDefect(float(per_window.mean()), per_window, window, flags)


@dataclass
class NullBand:
    mean: float
    sd: float
    upper: float
    samples: np.ndarray

    def contains(self, value: float) -> bool:
        return value <= self.upper


def martingale_null_band(
    p, window: int = 63, n_sims: int = 200, quantile: float = 0.95, seed: int = 0
) -> NullBand:
    """Monte Carlo distribution of the defect for Gaussian random walks with
    the same length, start and increment scale as ``p``."""
    p = np.asarray(p, dtype=float).ravel()
    scale = np.diff(p).std()
    rng = rng_stream(seed, 201)
    steps = rng.standard_normal((n_sims, p.size - 1)) * scale
    paths = p[0] + np.concatenate([np.zeros((n_sims, 1)), np.cumsum(steps, axis=1)], axis=1)
    samples = np.array([martingale_defect(path, window).value for path in paths])
    return NullBand(float(samples.mean()), float(samples.std(ddof=1)), float(np.quantile(samples, quantile)), samples)


# ---------------------------------------------------------------- Novikov


@dataclass
class NovikovResult:
    moment: float
    defect_d: float
    std_error: float
    flags: list[str] = field(default_factory=list)


def novikov_check(lambda_path, dt: float, n_paths: int = 10_000, seed: int = 0) -> NovikovResult:
    """Truncated exponential moment ``exp(0.5 sum |lambda|^2 dt)`` and the
    Monte Carlo gap ``|E[Z_T] - 1|`` of the stochastic exponential."""
    lam = np.asarray(lambda_path, dtype=float)
    lam = lam.reshape(lam.shape[0], -1)
    if not np.all(np.isfinite(lam)):
        raise DataError("market price of risk path must be finite")
    energy = 0.5 * float(np.sum(lam**2)) * dt
    if energy > 700.0:
        return NovikovResult(float("inf"), float("inf"), float("inf"), ["novikov_overflow"])
    rng = rng_stream(seed, 202)
    log_z = np.zeros(n_paths)
    sq = np.sqrt(dt)
    for row in lam:
        dw = rng.standard_normal((n_paths, row.size)) * sq
        log_z += -dw @ row - 0.5 * (row @ row) * dt
    with np.errstate(over="ignore"):
        z = np.exp(log_z)
    if not np.all(np.isfinite(z)):
        return NovikovResult(float(np.exp(energy)), float("inf"), float("inf"), ["novikov_overflow"])
    return NovikovResult(
        float(np.exp(energy)), float(abs(z.mean() - 1.0)), float(z.std(ddof=1) / np.sqrt(n_paths))
    )


# ---------------------------------------------------------------- spans and angles


def span_fidelity(r_hat, U) -> np.ndarray:
    """Norm of each fitted return row outside ``span(U)``."""
    r = np.atleast_2d(np.asarray(r_hat, dtype=float))
    U = np.asarray(U, dtype=float)
    off = r - (r @ U) @ U.T
    return np.linalg.norm(off, axis=1)


def principal_angles(U1, U2, tol: float = 1e-8) -> np.ndarray:
    """Principal angles in ``[0, pi/2]``, ascending."""
    for name, U in (("U1", U1), ("U2", U2)):
        U = np.asarray(U, dtype=float)
        if np.abs(U.T @ U - np.eye(U.shape[1])).max() > tol:
            raise DataError(f"{name} is not orthonormal")
    return np.sort(_angles(U1, U2))


# ---------------------------------------------------------------- conformality


def cosine_matrix(embeds) -> np.ndarray:
    """Pairwise cosines between the rows of ``embeds``."""
    E = np.atleast_2d(np.asarray(embeds, dtype=float))
    norms = np.linalg.norm(E, axis=1)
    if np.any(norms <= 1e-300):
        raise DataError("zero-norm embedding vector")
    unit = E / norms[:, None]
    return np.clip(unit @ unit.T, -1.0, 1.0)


def _psd_sqrt(M: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (M + M.T))
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def gram_procrustes_distance(G1, G2) -> float:
    """Orthogonal Procrustes distance between two configurations given by their Gram matrices."""
    root = _psd_sqrt(np.asarray(G1, dtype=float))
    cross = np.sqrt(np.clip(np.linalg.eigvalsh(root @ np.asarray(G2, dtype=float) @ root), 0.0, None)).sum()
    return float(np.sqrt(max(np.trace(G1) + np.trace(G2) - 2.0 * cross, 0.0)))


def scalarity_score(G_num, G_den, tol: float = 1e-10) -> float:
    """``lambda_max / lambda_min`` of ``G_num G_den^{-1}`` on the range of ``G_num``."""
    vals, vecs = np.linalg.eigh(0.5 * (G_num + G_num.T))
    keep = vals > tol * max(vals.max(), 1e-300)
    V = vecs[:, keep]
    ratio = np.linalg.eigvals(np.linalg.solve(V.T @ G_den @ V, V.T @ G_num @ V)).real
    return float(ratio.max() / ratio.min())


@dataclass
class ConformalDiag:
    cos_uncond: np.ndarray
    cos_cond: np.ndarray
    cos_beta: np.ndarray
    procrustes: dict
    scalarity_cond: float
    scalarity_beta: float

    @property
    def max_gap_cond(self) -> float:
        return float(np.abs(self.cos_cond - self.cos_uncond).max())

    @property
    def max_gap_beta(self) -> float:
        return float(np.abs(self.cos_beta - self.cos_cond).max())


def conformal_diag(cond_embeds, uncond_embeds, betas) -> ConformalDiag:
    """Angle comparison between unconditional, conditional and sensitivity embeddings.

    Embeddings are ``n x T`` (one row per asset, centered over the window);
    ``betas`` is ``n x m``. Scalarity scores are restricted to the range of
    the conditional Gram matrix, which has rank at most ``m``.
    """
    C = np.atleast_2d(np.asarray(cond_embeds, dtype=float))
    U = np.atleast_2d(np.asarray(uncond_embeds, dtype=float))
    B = np.atleast_2d(np.asarray(betas, dtype=float))
    if C.shape[0] < 2 or U.shape[0] != C.shape[0] or B.shape[0] != C.shape[0]:
        raise DataError("need matching rows for at least two assets")
    g_u, g_c, g_b = U @ U.T, C @ C.T, B @ B.T
    cos_u, cos_c, cos_b = cosine_matrix(U), cosine_matrix(C), cosine_matrix(B)
    return ConformalDiag(
        cos_u,
        cos_c,
        cos_b,
        {
            "uncond_cond": gram_procrustes_distance(cos_u, cos_c),
            "cond_beta": gram_procrustes_distance(cos_c, cos_b),
        },
        scalarity_score(g_c, g_u),
        scalarity_score(g_b, g_c),
    )


def mean_embeddings(returns, drivers, smooth: int = 1) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Build ``(uncond, cond, betas)`` embeddings from a return window.

    Drivers are whitened on the window, conditional means are the OLS fits on
    the whitened drivers, and the unconditional path is the centered realized
    return (optionally a trailing moving average over ``smooth`` periods).
    """
    A = np.asarray(returns, dtype=float)
    D = np.asarray(drivers, dtype=float)
    Dc = D - D.mean(axis=0)
    vals, vecs = np.linalg.eigh(Dc.T @ Dc / Dc.shape[0])
    if vals.min() <= 1e-12 * vals.max():
        raise DataError("drivers are collinear on the window")
    Z = Dc @ vecs / np.sqrt(vals)
    Ac = A - A.mean(axis=0)
    betas = np.linalg.lstsq(Z, Ac, rcond=None)[0].T
    cond = (Z @ betas.T).T
    if smooth > 1:
        kernel = np.ones(smooth) / smooth
        U = np.array([np.convolve(col, kernel, mode="valid") for col in Ac.T])
        U = U - U.mean(axis=1, keepdims=True)
    else:
        U = Ac.T
    return U, cond, betas


# ---------------------------------------------------------------- completeness


@dataclass
class Hedge:
    rank: int
    replicable: bool
    theta: np.ndarray
    residual: float


def completeness_hedge(sigma_pi, phi, rank_tol: float = 1e-10, range_tol: float = 1e-8) -> Hedge:
    """Numerical rank, replicability of ``phi`` and the minimum-norm hedge ``pinv(S') phi``."""
    S = np.asarray(sigma_pi, dtype=float)
    phi = np.asarray(phi, dtype=float).ravel()
    sv = np.linalg.svd(S, compute_uv=False)
    rank = int(np.sum(sv > rank_tol * max(sv.max(), 1e-300))) if sv.size else 0
    theta = np.linalg.pinv(S.T, rcond=rank_tol) @ phi
    norm = np.linalg.norm(phi)
    residual = float(np.linalg.norm(S.T @ theta - phi) / norm) if norm > 0 else 0.0
    return Hedge(rank, residual <= range_tol, theta, residual)


def posterior_integrated_cov(sigma_fn: Callable[[np.ndarray], np.ndarray], particles, weights=None) -> np.ndarray:
    """Posterior average of a state-dependent covariance over weighted particles."""
    X = np.atleast_2d(np.asarray(particles, dtype=float))
    w = np.full(X.shape[0], 1.0 / X.shape[0]) if weights is None else np.asarray(weights, dtype=float)
    w = w / w.sum()
    return sum(wk * np.asarray(sigma_fn(x), dtype=float) for wk, x in zip(w, X))


# ---------------------------------------------------------------- counterfactual mixtures


class GaussianMixture1D:
    """Mixture of 1-D Gaussians ``sum_i pi_i N(mu_i, sigma_i^2)``."""

    def __init__(self, components: Sequence[tuple[float, float]], weights):
        if len(components) == 0:
            raise DataError("empty component list")
        comp = np.asarray(components, dtype=float).reshape(-1, 2)
        w = np.asarray(weights, dtype=float).ravel()
        if w.size != comp.shape[0]:
            raise DataError("one weight per component required")
        if np.any(w < -1e-12) or abs(w.sum() - 1.0) > 1e-9:
            raise DataError("posterior must lie on the simplex")
        if np.any(comp[:, 1] <= 0):
            raise DataError("component scales must be positive")
        self.mu = comp[:, 0]
        self.sigma = comp[:, 1]
        self.weights = np.clip(w, 0.0, None) / np.clip(w, 0.0, None).sum()

    def pdf(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)[..., None]
        z = (x - self.mu) / self.sigma
        return np.sum(self.weights * np.exp(-0.5 * z**2) / (self.sigma * np.sqrt(2 * np.pi)), axis=-1)

    def cdf(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)[..., None]
        return np.sum(self.weights * ndtr((x - self.mu) / self.sigma), axis=-1)

    def quantile(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        lo = np.full(u.shape, (self.mu - 40 * self.sigma).min())
        hi = np.full(u.shape, (self.mu + 40 * self.sigma).max())
        for _ in range(64):
            mid = 0.5 * (lo + hi)
            below = self.cdf(mid) < u
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        return 0.5 * (lo + hi)

    def sample(self, size: int, rng: np.random.Generator) -> np.ndarray:
        idx = rng.choice(self.mu.size, size=size, p=self.weights)
        return self.mu[idx] + self.sigma[idx] * rng.standard_normal(size)


def w2_1d(a: GaussianMixture1D, b: GaussianMixture1D, n_grid: int = 4000) -> float:
    """1-D Wasserstein-2 distance by midpoint quantile integration."""
    u = (np.arange(n_grid) + 0.5) / n_grid
    return float(np.sqrt(np.mean((a.quantile(u) - b.quantile(u)) ** 2)))


def gaussian_w2(m1: float, s1: float, m2: float, s2: float) -> float:
    return float(np.hypot(m1 - m2, s1 - s2))


@dataclass
class CounterfactualCheck:
    w2_mixture: float
    lipschitz: float
    w2_posterior: float
    bound: float
    holds: bool


def counterfactual_mixture(
    components: Sequence[tuple[float, float]], posterior, other_posterior=None, n_grid: int = 4000
):
    """Mixture law for ``posterior``; with ``other_posterior`` also the W2 bound check.

    The bound uses ``L = max pairwise component W2`` and the 0/1 metric on
    component labels, for which ``W2(pi, pi') = sqrt(TV(pi, pi'))``.
    """
    mix = GaussianMixture1D(components, posterior)
    if other_posterior is None:
        return mix
    other = GaussianMixture1D(components, other_posterior)
    comp = list(zip(mix.mu, mix.sigma))
    L = max(
        (gaussian_w2(*ci, *cj) for i, ci in enumerate(comp) for cj in comp[i + 1 :]), default=0.0
    )
    tv = 0.5 * float(np.abs(mix.weights - other.weights).sum())
    w2_post = float(np.sqrt(tv))
    w2_mix = w2_1d(mix, other, n_grid)
    bound = L * w2_post
    return mix, CounterfactualCheck(w2_mix, L, w2_post, bound, w2_mix <= bound + 1e-6)


def gaussian_kl(mean1, cov1, mean0, cov0) -> float:
    """``KL(N(mean1, cov1) || N(mean0, cov0))``."""
    m1, m0 = np.atleast_1d(mean1).astype(float), np.atleast_1d(mean0).astype(float)
    S1, S0 = np.atleast_2d(cov1).astype(float), np.atleast_2d(cov0).astype(float)
    k = m1.size
    diff = m0 - m1
    sol = np.linalg.solve(S0, np.column_stack([S1, diff]))
    _, logdet0 = np.linalg.slogdet(S0)
    _, logdet1 = np.linalg.slogdet(S1)
    return float(0.5 * (np.trace(sol[:, :k]) + diff @ sol[:, k] - k + logdet0 - logdet1))


# ---------------------------------------------------------------- regimes


def regime_label(
    equity, window_days: int = 63, dd_thresh: float = 0.10, vol_pctl: float = 0.80
) -> np.ndarray:
    """Label each trailing window ``'crisis'`` or ``'expansion'``.

    Crisis when the in-window peak-to-trough drawdown exceeds ``dd_thresh``
    or the window's realized vol is above its in-sample ``vol_pctl`` quantile
    (both strict, with a 1e-12 relative tolerance for ties).
    """
    e = np.asarray(equity, dtype=float).ravel()
    if e.size < window_days:
        raise DataError("series shorter than the regime window")
    if np.any(e <= 0):
        raise DataError("equity must be positive")
    windows = sliding_window_view(e, window_days)
    peak = np.maximum.accumulate(windows, axis=1)
    drawdown = np.max(1.0 - windows / peak, axis=1)
    vols = np.diff(np.log(windows), axis=1).std(axis=1)
    threshold = np.quantile(vols, vol_pctl)
    crisis = (drawdown > dd_thresh * (1 + 1e-12)) | (vols > threshold * (1 + 1e-12) + 1e-300)
    return np.where(crisis, "crisis", "expansion")


@dataclass
class StructuralDiag:
    martingale_defect: float
    span_fidelity: np.ndarray
    principal_angles: list
    novikov_moment: float
    defect_d: float
    flags: list[str] = field(default_factory=list)
