"""Latent-driver filtering: extended Kalman filter and bootstrap particle filter.

The state follows ``dF = a(F, t) dt + dW`` with ``Cov(dW) = Q dt`` and is
observed through ``Y = h(F, t) + nu`` with ``nu ~ N(0, R)``. Both filters use
the same Euler-Maruyama transition ``F + a(F, t) dt``, so the EKF's
propagation Jacobian is ``I + A dt`` and its process noise is ``Q dt``.

Model callables must broadcast over leading axes (shape ``(..., m)``) so
particles can be propagated in one call.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigError, DataError, NumericalError
from .synth import psd_sqrt

Matrix = np.ndarray | Callable[[float], np.ndarray]


def _at(value: Matrix, t: float) -> np.ndarray:
    return np.atleast_2d(np.asarray(value(t) if callable(value) else value, dtype=float))


@dataclass
class StateSpaceModel:
    drift: Callable[[np.ndarray, float], np.ndarray]
    drift_jac: Callable[[np.ndarray, float], np.ndarray]
    Q: Matrix
    obs: Callable[[np.ndarray, float], np.ndarray]
    obs_jac: Callable[[np.ndarray, float], np.ndarray]
    R: Matrix
    dt: float = 1.0

    def __post_init__(self):
        if not self.dt > 0:
            raise ConfigError("dt must be positive")


def linear_model(drift_matrix, Q, H, R, dt: float = 1.0, drift_offset=None, obs_offset=None) -> StateSpaceModel:
    """Linear-Gaussian model: ``a(f) = drift_matrix f + drift_offset``, ``h(f) = H f + obs_offset``."""
    A = np.atleast_2d(np.asarray(drift_matrix, dtype=float))
    Hm = np.atleast_2d(np.asarray(H, dtype=float))
    c = np.zeros(A.shape[0]) if drift_offset is None else np.asarray(drift_offset, dtype=float)
    d = np.zeros(Hm.shape[0]) if obs_offset is None else np.asarray(obs_offset, dtype=float)
    R = np.atleast_2d(np.asarray(R, dtype=float))
    if np.linalg.eigvalsh(0.5 * (R + R.T)).min() <= 0:
        raise ConfigError("observation noise R must be positive definite")
    psd_sqrt(Q, "Q")
    return StateSpaceModel(
        drift=lambda f, t: f @ A.T + c,
        drift_jac=lambda f, t: A,
        Q=np.atleast_2d(np.asarray(Q, dtype=float)),
        obs=lambda f, t: f @ Hm.T + d,
        obs_jac=lambda f, t: Hm,
        R=R,
        dt=dt,
    )


def ou_model(kappa, fbar, Q, R, dt: float = 1.0, H=None) -> StateSpaceModel:
    """Mean-reverting drivers ``a(f) = kappa (fbar - f)`` observed linearly."""
    kappa = np.atleast_2d(np.asarray(kappa, dtype=float))
    fbar = np.atleast_1d(np.asarray(fbar, dtype=float))
    m = kappa.shape[0]
    H = np.eye(m) if H is None else H
    return linear_model(-kappa, Q, H, R, dt, drift_offset=kappa @ fbar)


def fit_ar1_model(readings, dt: float = 1.0, max_persistence: float = 0.995) -> tuple[StateSpaceModel, "GaussianBelief"]:
    """Per-column AR(1)-plus-noise model for noisy driver readings, by moments.

    With ``y = f + noise`` and ``f`` AR(1) with coefficient ``phi``, the lag-1
    and lag-2 autocovariances give ``phi = g2 / g1`` and signal variance
    ``g1 / phi``; the remainder of ``g0`` is observation noise. Returns the
    model (unit spacing scaled by ``dt``) and the stationary prior belief.
    """
    y = np.asarray(readings, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    if y.shape[0] < 10:
        raise DataError("need at least 10 readings to fit the driver model")
    mean = y.mean(axis=0)
    yc = y - mean
    g0 = np.mean(yc**2, axis=0)
    if np.any(g0 <= 0):
        raise DataError("constant driver reading")
    g1 = np.mean(yc[1:] * yc[:-1], axis=0)
    g2 = np.mean(yc[2:] * yc[:-2], axis=0)
    valid = (g1 > 0) & (g2 > 0)
    phi = np.where(valid, g2 / np.where(valid, g1, 1.0), 0.5)
    phi = np.clip(phi, 0.05, max_persistence)
    signal = np.where(valid, g1 / phi, 0.5 * g0)
    signal = np.clip(signal, 0.05 * g0, 0.95 * g0)
    noise = g0 - signal
    kappa = np.diag((1.0 - phi) / dt)
    Q = np.diag(signal * (1.0 - phi**2) / dt)
    model = ou_model(kappa, mean, Q, np.diag(noise), dt)
    return model, GaussianBelief(mean.copy(), np.diag(signal))


@dataclass
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray


@dataclass
class ParticleBelief:
    particles: np.ndarray  # N x m
    weights: np.ndarray  # N, sums to 1
    ess: float
    ess_before_resampling: float | None = None
    resampled: bool = False
    # weighted moments taken before resampling (lower Monte Carlo noise)
    mean: np.ndarray | None = None
    cov: np.ndarray | None = None


@dataclass(frozen=True)
class FilterConfig:
    n_particles: int = 1000
    ess_threshold: float = 0.5
    jitter: float = 1e-3
    seed: int = 0
    joseph: bool = False

    def __post_init__(self):
        if self.n_particles < 2:
            raise ConfigError("n_particles must be >= 2")
        if not 0 < self.ess_threshold <= 1:
            raise ConfigError("ess_threshold must lie in (0, 1]")
        if self.jitter < 0:
            raise ConfigError("jitter must be non-negative")


def _symmetrize(mat: np.ndarray) -> np.ndarray:
    return 0.5 * (mat + mat.T)


def ekf_step(
    model: StateSpaceModel, belief: GaussianBelief, y, t: float = 0.0, joseph: bool = False
) -> GaussianBelief:
    """One EKF predict/update; the observation is taken at ``t + dt``."""
    dt = model.dt
    mu, cov = np.asarray(belief.mean, dtype=float), np.asarray(belief.cov, dtype=float)
    m = mu.size
    prior_mean = mu + model.drift(mu, t) * dt
    transition = np.eye(m) + np.atleast_2d(model.drift_jac(mu, t)) * dt
    prior_cov = transition @ cov @ transition.T + _at(model.Q, t) * dt

    t_obs = t + dt
    H = np.atleast_2d(model.obs_jac(prior_mean, t_obs))
    R = _at(model.R, t_obs)
    innov_cov = H @ prior_cov @ H.T + R
    if np.linalg.cond(innov_cov) > 1e14:
        raise NumericalError("innovation covariance is numerically singular")
    gain = np.linalg.solve(innov_cov, H @ prior_cov).T
    innovation = np.asarray(y, dtype=float) - model.obs(prior_mean, t_obs)
    post_mean = prior_mean + gain @ innovation
    if joseph:
        left = np.eye(m) - gain @ H
        post_cov = left @ prior_cov @ left.T + gain @ R @ gain.T
    else:
        post_cov = (np.eye(m) - gain @ H) @ prior_cov
    return GaussianBelief(post_mean, _symmetrize(post_cov))


def effective_sample_size(weights) -> float:
    w = np.asarray(weights, dtype=float)
    return float(1.0 / np.sum(w**2))


def stratified_resample(weights, rng: np.random.Generator) -> np.ndarray:
    """Indices drawn with one uniform per stratum ``[i/N, (i+1)/N)``."""
    w = np.asarray(weights, dtype=float)
    n = w.size
    points = (np.arange(n) + rng.uniform(size=n)) / n
    cumulative = np.cumsum(w)
    cumulative[-1] = 1.0
    return np.minimum(np.searchsorted(cumulative, points, side="right"), n - 1)


def particle_moments(particles, weights) -> tuple[np.ndarray, np.ndarray]:
    """Weighted mean and covariance of a particle cloud."""
    x = np.asarray(particles, dtype=float)
    w = np.asarray(weights, dtype=float)
    mean = w @ x
    centered = x - mean
    cov = (centered * w[:, None]).T @ centered
    return mean, _symmetrize(cov)


def _gaussian_loglik(innov: np.ndarray, R: np.ndarray) -> np.ndarray:
    chol = np.linalg.cholesky(R)
    z = np.linalg.solve(chol, innov.T)
    return -0.5 * np.sum(z**2, axis=0)


def pf_step(
    model: StateSpaceModel,
    belief: ParticleBelief,
    y,
    rng: np.random.Generator,
    cfg: FilterConfig = FilterConfig(),
    t: float = 0.0,
) -> ParticleBelief:
    """Propagate, reweight against ``y`` and resample when the ESS is low."""
    x = np.asarray(belief.particles, dtype=float)
    n, m = x.shape
    if n < 2:
        raise DataError("particle filter needs at least 2 particles")
    dt = model.dt
    root = psd_sqrt(_at(model.Q, t) * dt, "Q dt")
    x = x + model.drift(x, t) * dt + rng.standard_normal((n, m)) @ root.T

    t_obs = t + dt
    innov = np.asarray(y, dtype=float) - model.obs(x, t_obs)
    with np.errstate(divide="ignore"):
        logw = np.log(np.asarray(belief.weights, dtype=float)) + _gaussian_loglik(
            np.atleast_2d(innov.reshape(n, -1)), _at(model.R, t_obs)
        )
    top = logw.max()
    if not np.isfinite(top):
        raise NumericalError("all particle log-weights are -inf")
    w = np.exp(logw - top)
    w /= w.sum()
    ess = effective_sample_size(w)
    mean, cov = particle_moments(x, w)
    if ess < cfg.ess_threshold * n:
        spread = np.sqrt(np.clip(np.diag(cov), 0.0, None))
        idx = stratified_resample(w, rng)
        x = x[idx] + cfg.jitter * spread * rng.standard_normal((n, m))
        w = np.full(n, 1.0 / n)
        return ParticleBelief(x, w, float(n), ess, True, mean, cov)
    return ParticleBelief(x, w, ess, ess, False, mean, cov)


@dataclass
class PosteriorPath:
    kind: str
    means: np.ndarray  # T x m
    covs: np.ndarray  # T x m x m
    ess: np.ndarray | None = None  # before any resampling at that step
    resample_count: int = 0

    def packed(self) -> np.ndarray:
        """Means followed by the upper triangle of each covariance, one row per step."""
        m = self.means.shape[1] if self.means.ndim == 2 else 0
        iu = np.triu_indices(m)
        cols = [self.means, self.covs[:, iu[0], iu[1]]]
        if self.ess is not None:
            cols.append(self.ess[:, None])
        return np.hstack(cols)

    def column_names(self) -> list[str]:
        m = self.means.shape[1]
        names = [f"mean_{i}" for i in range(m)]
        names += [f"cov_{i}_{j}" for i, j in zip(*np.triu_indices(m))]
        if self.ess is not None:
            names.append("ess")
        return names


def run_filter(
    model: StateSpaceModel,
    observations,
    init: GaussianBelief,
    kind: str = "ekf",
    cfg: FilterConfig = FilterConfig(),
    t0: float = 0.0,
) -> PosteriorPath:
    """Filter an observation sequence; row ``k`` is the belief after observation ``k``."""
    obs = np.asarray(observations, dtype=float)
    if obs.ndim == 1:
        obs = obs[:, None]
    m = np.asarray(init.mean).size
    T = obs.shape[0]
    means = np.empty((T, m))
    covs = np.empty((T, m, m))
    if kind == "ekf":
        belief = GaussianBelief(np.asarray(init.mean, float), np.asarray(init.cov, float))
        for k in range(T):
            belief = ekf_step(model, belief, obs[k], t0 + k * model.dt, cfg.joseph)
            means[k], covs[k] = belief.mean, belief.cov
        return PosteriorPath("ekf", means, covs)
    if kind == "pf":
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(cfg.seed), 101])))
        root = psd_sqrt(init.cov, "initial covariance")
        particles = np.asarray(init.mean, float) + rng.standard_normal((cfg.n_particles, m)) @ root.T
        belief = ParticleBelief(particles, np.full(cfg.n_particles, 1.0 / cfg.n_particles), float(cfg.n_particles))
        ess = np.empty(T)
        resamples = 0
        for k in range(T):
            belief = pf_step(model, belief, obs[k], rng, cfg, t0 + k * model.dt)
            means[k], covs[k] = belief.mean, belief.cov
            ess[k] = belief.ess_before_resampling
            resamples += int(belief.resampled)
        return PosteriorPath("pf", means, covs, ess, resamples)
    raise ConfigError(f"unknown filter kind {kind!r}")
