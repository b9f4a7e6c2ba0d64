"""Allocation layer: frame transport, manifold and driver-space mean-variance,
post-processing, simplex mirror steps, blending and the classical allocators
(Markowitz, Black-Litterman, entropy pooling)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import logsumexp

from .errors import ConfigError, DataError, NumericalError


def _vec(x) -> np.ndarray:
    return np.asarray(x, dtype=float).ravel()


def _mat(x) -> np.ndarray:
    return np.atleast_2d(np.asarray(x, dtype=float))


# ---------------------------------------------------------------- frames


@dataclass
class FrameTransport:
    U: np.ndarray
    U_tilde: np.ndarray
    rotation: np.ndarray
    grassmann_dist: float
    flags: list[str] = field(default_factory=list)

    @property
    def rank(self) -> int:
        return self.U.shape[1]


def orthonormal_basis(B, tol: float = 1e-10) -> tuple[np.ndarray, bool]:
    """Orthonormal basis of ``range(B)`` with a positive-diagonal QR convention.

    Returns ``(U, deficient)``. When ``B`` is rank deficient the basis comes
    from the leading left singular vectors instead and ``deficient`` is True.
    """
    B = _mat(B)
    if B.shape[0] == 1 and B.shape[1] > 1:
        B = B.T
    sv = np.linalg.svd(B, compute_uv=False)
    if sv.size == 0 or sv[0] == 0.0:
        raise DataError("cannot build a frame from a zero matrix")
    rank = int(np.sum(sv > tol * sv[0]))
    if rank == B.shape[1]:
        Q, R = np.linalg.qr(B)
        signs = np.sign(np.diag(R))
        signs[signs == 0] = 1.0
        return Q * signs, False
    left = np.linalg.svd(B, full_matrices=False)[0][:, :rank]
    Q, R = np.linalg.qr(left)
    signs = np.sign(np.diag(R))
    signs[signs == 0] = 1.0
    return Q * signs, True


def principal_angles(U, V) -> np.ndarray:
    """Principal angles (ascending) between the spans of orthonormal ``U`` and ``V``.

    Small angles are taken from the sine side so coincident spans give exactly
    tiny values rather than ``sqrt(eps)`` noise.
    """
    U, V = _mat(U), _mat(V)
    cos = np.clip(np.linalg.svd(U.T @ V, compute_uv=False), -1.0, 1.0)
    if U.shape[1] != V.shape[1]:
        return np.arccos(cos)
    sin = np.sort(np.linalg.svd(V - U @ (U.T @ V), compute_uv=False))
    return np.arctan2(sin, cos)


def procrustes_rotation(U, U_prev) -> tuple[np.ndarray, np.ndarray]:
    """Orthogonal ``R`` minimizing ``||U R - U_prev||_F`` and the singular values of ``U^T U_prev``."""
    P, s, Vt = np.linalg.svd(_mat(U).T @ _mat(U_prev))
    return P @ Vt, s


def transport_basis(B, prev_frame=None, tol: float = 1e-10) -> FrameTransport:
    """Orthonormalize ``B`` and rotate the basis to best match ``prev_frame``."""
    U, deficient = orthonormal_basis(B, tol)
    flags = ["rank_deficient"] if deficient else []
    q = U.shape[1]
    if prev_frame is None:
        return FrameTransport(U, U.copy(), np.eye(q), 0.0, flags)
    prev = _mat(prev_frame)
    if prev.shape[0] != U.shape[0]:
        raise DataError("previous frame has a different number of assets")
    if prev.shape[1] != q:
        dist = float(np.linalg.norm(principal_angles(U, prev)))
        return FrameTransport(U, U.copy(), np.eye(q), dist, flags + ["rank_changed"])
    R, _ = procrustes_rotation(U, prev)
    dist = float(np.linalg.norm(principal_angles(U, prev)))
    return FrameTransport(U, U @ R, R, dist, flags)


def project_budget_span(w, U) -> np.ndarray:
    """Euclidean projection of ``w`` onto ``span(U)`` intersected with ``1'w = 1`` (``U`` orthonormal)."""
    U = _mat(U)
    c = U.T @ np.ones(U.shape[0])
    if np.linalg.norm(c) <= 1e-12:
        raise DataError("the span contains no budget-feasible portfolio")
    alpha = U.T @ _vec(w)
    alpha = alpha - c * (c @ alpha - 1.0) / (c @ c)
    return U @ alpha


def sigma_projection(theta, basis, Sigma) -> np.ndarray:
    """Projection of ``theta`` onto ``span(basis)`` in the ``Sigma`` inner product."""
    V = _mat(basis)
    if V.shape[0] == 1 and V.shape[1] > 1:
        V = V.T
    S = _mat(Sigma)
    gram = V.T @ S @ V
    return V @ np.linalg.solve(gram, V.T @ S @ _vec(theta))


# ---------------------------------------------------------------- mean-variance


def manifold_mv_kkt(U, mu, Sigma, lambda_mv: float, ridge: float = 0.0) -> np.ndarray:
    """Budget-constrained mean-variance on ``span(U)`` via the bordered KKT system.

    Solves ``[lambda U'SU + ridge I, U'1; 1'U, 0] [alpha; nu] = [U'mu; 1]`` and
    returns ``U alpha``.
    """
    U = _mat(U)
    if U.shape[0] == 1 and U.shape[1] > 1:
        U = U.T
    n, q = U.shape
    if lambda_mv <= 0 or ridge < 0:
        raise ConfigError("lambda_mv must be positive and ridge non-negative")
    c = U.T @ np.ones(n)
    if np.linalg.norm(c) <= 1e-12 * np.sqrt(n):
        raise DataError("infeasible budget: 1'U is zero")
    kkt = np.zeros((q + 1, q + 1))
    kkt[:q, :q] = lambda_mv * U.T @ _mat(Sigma) @ U + ridge * np.eye(q)
    kkt[:q, q] = c
    kkt[q, :q] = c
    if np.linalg.cond(kkt) > 1e14:
        raise NumericalError("singular KKT system; add a ridge")
    rhs = np.concatenate([U.T @ _vec(mu), [1.0]])
    alpha = np.linalg.solve(kkt, rhs)[:q]
    return U @ alpha


def _pd_solve(S: np.ndarray, b: np.ndarray, name: str) -> np.ndarray:
    try:
        chol = np.linalg.cholesky(0.5 * (S + S.T))
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"{name} is not positive definite") from exc
    if np.diag(chol).min() <= 1e-10 * np.diag(chol).max():
        raise NumericalError(f"{name} is numerically singular")
    y = np.linalg.solve(chol, b)
    return np.linalg.solve(chol.T, y)


def driver_mv_closed(mu_f, sigma_f, lambda_mv: float) -> np.ndarray:
    """Driver tilt ``phi = Sigma_F^{-1} mu_F / lambda``."""
    if lambda_mv <= 0:
        raise ConfigError("lambda_mv must be positive")
    return _pd_solve(_mat(sigma_f), _vec(mu_f), "Sigma_F") / lambda_mv


def map_min_norm(B, beta) -> np.ndarray:
    """Minimum-norm ``w`` with ``B' w = beta``."""
    B = _mat(B)
    if B.shape[0] == 1 and B.shape[1] > 1:
        B = B.T
    return B @ _pd_solve(B.T @ B, _vec(beta), "B'B")


def markowitz_closed(mu, Sigma, lambda_mv: float) -> np.ndarray:
    """Budget-constrained mean-variance: ``w = Sigma^{-1}(mu - eta 1)/lambda``."""
    if lambda_mv <= 0:
        raise ConfigError("lambda_mv must be positive")
    S = _mat(Sigma)
    mu = _vec(mu)
    ones = np.ones(mu.size)
    a = _pd_solve(S, mu, "Sigma")
    b = _pd_solve(S, ones, "Sigma")
    eta = (ones @ a - lambda_mv) / (ones @ b)
    return (a - eta * b) / lambda_mv


@dataclass(frozen=True)
class BLInputs:
    delta: float
    w_eq: np.ndarray
    tau_bl: float
    P: np.ndarray
    Q: np.ndarray
    Omega: np.ndarray

    def __post_init__(self):
        if not self.tau_bl > 0:
            raise ConfigError("tau_bl must be positive")
        omega = _mat(self.Omega)
        if np.linalg.eigvalsh(0.5 * (omega + omega.T)).min() <= 0:
            raise ConfigError("Omega must be positive definite")


def black_litterman(inputs: BLInputs, Sigma) -> np.ndarray:
    """Posterior mean ``[(tS)^-1 + P'O^-1 P]^-1 [(tS)^-1 Pi + P'O^-1 Q]`` with ``Pi = delta S w_eq``."""
    S = _mat(Sigma)
    P = _mat(inputs.P)
    Q = _vec(inputs.Q)
    omega = _mat(inputs.Omega)
    pi = inputs.delta * S @ _vec(inputs.w_eq)
    prior_prec = np.linalg.inv(inputs.tau_bl * S)
    omega_inv = np.linalg.inv(omega)
    bracket = prior_prec + P.T @ omega_inv @ P
    if np.linalg.cond(bracket) > 1e15:
        raise NumericalError("singular Black-Litterman precision")
    return np.linalg.solve(bracket, prior_prec @ pi + P.T @ omega_inv @ Q)


# ---------------------------------------------------------------- entropy pooling


def kl_divergence(q, p) -> float:
    """``KL(q || p)`` for discrete distributions (``0 log 0 = 0``)."""
    q, p = _vec(q), _vec(p)
    mask = q > 0
    if np.any(p[mask] <= 0):
        return float("inf")
    return float(np.sum(q[mask] * (np.log(q[mask]) - np.log(p[mask]))))


def _tilt(logp: np.ndarray, V: np.ndarray, lam: np.ndarray) -> np.ndarray:
    logits = logp + V @ lam
    return np.exp(logits - logsumexp(logits))


def entropy_pool(
    prior,
    view_matrix,
    view_targets,
    kl_budget: float = np.inf,
    floor: float = 0.0,
    tol: float = 1e-12,
    max_iter: int = 200,
) -> np.ndarray:
    """Minimum-KL posterior matching ``q' view_matrix = view_targets``.

    The exponential-tilt multipliers come from Newton's method on the convex
    dual. If the solution exceeds ``kl_budget`` the posterior is pulled back
    along ``prior^(1-t) q*^t`` to the budget. Probabilities are then floored
    and renormalized.
    """
    p = _vec(prior)
    K = p.size
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-10:
        raise DataError("prior must lie on the simplex")
    if floor < 0 or floor * K >= 1:
        raise ConfigError("floor must satisfy 0 <= floor * K < 1")
    if not kl_budget > 0:
        raise ConfigError("kl_budget must be positive")
    V = np.asarray(view_matrix, dtype=float).reshape(K, -1)
    t = _vec(view_targets)
    if V.shape[1] != t.size:
        raise DataError("view_matrix columns and view_targets disagree")

    # recentre each view at its target and scale to unit spread; the constraint set is unchanged
    spread = V.std(axis=0)
    flat = spread <= 1e-300
    if np.any(np.abs(V[:, flat].mean(axis=0) - t[flat]) > 0):
        raise DataError("entropy pooling views are infeasible (constant statistic off target)")
    V = (V[:, ~flat] - t[~flat]) / spread[~flat]
    t = np.zeros(V.shape[1])

    q = p.copy()
    if t.size:
        with np.errstate(divide="ignore"):
            logp = np.log(p)
        lam = np.zeros(t.size)
        scale = 1.0

        def dual(l):
            return logsumexp(logp + V @ l) - l @ t

        for _ in range(max_iter):
            q = _tilt(logp, V, lam)
            moments = q @ V
            grad = moments - t
            if np.abs(grad).max() <= tol * scale:
                break
            centered = V - moments
            hess = (centered * q[:, None]).T @ centered + 1e-14 * scale**2 * np.eye(t.size)
            step = np.linalg.lstsq(hess, grad, rcond=None)[0]
            current, shrink = dual(lam), 1.0
            while shrink > 1e-12 and dual(lam - shrink * step) > current - 1e-4 * shrink * grad @ step:
                shrink *= 0.5
            lam = lam - shrink * step
            if not np.all(np.isfinite(lam)) or np.abs(lam).max() > 1e10 / scale:
                raise DataError("entropy pooling views are infeasible (dual diverged)")
        else:
            raise DataError("entropy pooling views are infeasible (no convergence)")

        if kl_divergence(q, p) > kl_budget:
            lo, hi = 0.0, 1.0
            for _ in range(200):
                mid = 0.5 * (lo + hi)
                if kl_divergence(_tilt(logp, V, mid * lam), p) > kl_budget:
                    hi = mid
                else:
                    lo = mid
                if hi - lo < 1e-15:
                    break
            q = _tilt(logp, V, lo * lam)
    if floor > 0:
        q = np.maximum(q, floor)
        q = q / q.sum()
    return q


# ---------------------------------------------------------------- post-processing & geometry


@dataclass
class Scaled:
    weights: np.ndarray
    scale: float
    flags: list[str] = field(default_factory=list)


def post_process(
    w,
    Sigma,
    vol_target: float = 0.10,
    scale_clip: tuple[float, float] = (0.25, 4.0),
    lev_cap: float = 2.0,
    periods_per_year: float = 252.0,
) -> Scaled:
    """Volatility targeting with a clipped scale, then an L1 leverage cap."""
    if not vol_target > 0:
        raise ConfigError("vol_target must be positive")
    lo, hi = scale_clip
    w = _vec(w).copy()
    flags = []
    variance = float(w @ _mat(Sigma) @ w)
    if variance <= 0:
        flags.append("zero_variance")
        scale = 1.0
    else:
        scale = float(np.clip(vol_target / (np.sqrt(variance) * np.sqrt(periods_per_year)), lo, hi))
    w *= scale
    gross = np.abs(w).sum()
    if gross > lev_cap:
        w *= lev_cap / gross
        flags.append("leverage_capped")
    return Scaled(w, scale, flags)


def scalings_conflict(s_tau: float, vol_scale: float, band: tuple[float, float] = (0.25, 2.25)) -> bool:
    """True when the HJB amplitude and the vol-target scale compound outside ``band``."""
    product = s_tau * vol_scale
    return not band[0] <= product <= band[1]


@dataclass
class MirrorStep:
    weights: np.ndarray
    eta: float
    turnover: float
    saturated: bool


def mirror_simplex(w_prev, signal, turnover_target: float, floor: float = 1e-8, tol: float = 1e-13) -> MirrorStep:
    """KL-mirror step ``w ∝ w_prev * exp(eta d)`` sized to an L1 turnover target.

    ``d`` is the signal minus its ``w_prev``-weighted mean. When the target is
    beyond the supremum reachable as ``eta -> inf`` the limit point is returned
    with ``saturated=True``.
    """
    if turnover_target < 0:
        raise ConfigError("turnover_target must be non-negative")
    base = np.maximum(_vec(w_prev), floor)
    base = base / base.sum()
    s = _vec(signal)
    if not np.all(np.isfinite(s)):
        raise DataError("signal must be finite")
    d = s - base @ s
    logb = np.log(base)

    def at(eta):
        w = _tilt(logb, d[:, None], np.array([eta]))
        return w, float(np.abs(w - base).sum())

    if turnover_target == 0:
        return MirrorStep(base, 0.0, 0.0, False)
    top = d.max()
    winners = d >= top - 1e-12 * max(1.0, np.abs(d).max())
    limit = np.where(winners, base, 0.0)
    limit = limit / limit.sum()
    reachable = float(np.abs(limit - base).sum())
    if turnover_target >= reachable - tol:
        return MirrorStep(limit, np.inf, reachable, True)
    lo, hi = 0.0, 1.0 / max(np.abs(d).max(), 1e-300)
    while at(hi)[1] < turnover_target:
        lo, hi = hi, 2.0 * hi
    for _ in range(400):
        mid = 0.5 * (lo + hi)
        _, to = at(mid)
        if abs(to - turnover_target) <= tol:
            lo = hi = mid
            break
        if to < turnover_target:
            lo = mid
        else:
            hi = mid
    w, to = at(0.5 * (lo + hi))
    return MirrorStep(w, 0.5 * (lo + hi), to, False)


def project_simplex(v) -> np.ndarray:
    """Euclidean projection onto ``{w >= 0, sum w = 1}`` (sort-based)."""
    v = _vec(v)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    k = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / k > 0)[0][-1]
    shift = css[rho] / (rho + 1.0)
    w = np.maximum(v - shift, 0.0)
    return w / w.sum()


def soft_blend(
    w_raw, w_pde, lam: float, projector: str | Callable[[np.ndarray], np.ndarray] | None = None
) -> np.ndarray:
    """``projector((1 - lam) w_raw + lam w_pde)``; ``projector='simplex'`` uses :func:`project_simplex`."""
    if not 0.0 <= lam <= 1.0:
        raise ConfigError("blend weight must lie in [0, 1]")
    w = (1.0 - lam) * _vec(w_raw) + lam * _vec(w_pde)
    if projector is None:
        return w
    if projector == "simplex":
        return project_simplex(w)
    if callable(projector):
        return np.asarray(projector(w), dtype=float)
    raise ConfigError(f"unknown projector {projector!r}")


@dataclass
class Whitening:
    z: np.ndarray
    distortion: float
    U: np.ndarray
    eigenvalues: np.ndarray


def whiten_coords(sigma_span, x, rank: int | None = None, tol: float = 1e-10) -> Whitening:
    """Coordinates ``z = Lambda^{1/2} U' x`` on the span of a PSD matrix.

    With ``rank`` given, the top ``rank`` eigenpairs are used and a zero
    eigenvalue among them is an error; otherwise the numerical rank is used.
    """
    S = _mat(sigma_span)
    vals, vecs = np.linalg.eigh(0.5 * (S + S.T))
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]
    top = max(vals[0], 0.0)
    if rank is None:
        rank = int(np.sum(vals > tol * max(top, 1e-300)))
        if rank == 0:
            raise DataError("matrix has no positive eigenvalue")
    elif vals[rank - 1] <= tol * max(top, 1e-300):
        raise DataError("zero eigenvalue on the requested span")
    lam = vals[:rank]
    U = vecs[:, :rank]
    proj = U.T @ np.asarray(x, dtype=float)
    z = (np.sqrt(lam) * proj.T).T
    return Whitening(z, float(np.sqrt(lam.max() / lam.min())), U, lam)
