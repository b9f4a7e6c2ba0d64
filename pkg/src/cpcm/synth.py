"""Synthetic markets with known ground truth.

Two generators are provided: a multi-driver Ornstein-Uhlenbeck market
simulated by Euler-Maruyama, and a static linear-Gaussian common-cause model
in which assets are conditionally independent given the drivers.

Every noise source draws from its own counter-based stream keyed on
``(seed, source)``, so adding a source never perturbs the others.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from os import PathLike
from pathlib import Path

import numpy as np

from .data import cumulate, write_wide_csv
from .errors import DataError

# stream identifiers; never renumber
_DRIVER_NOISE, _ASSET_NOISE, _OBS_NOISE, _SCM_DRIVERS, _SCM_IDIO, _LIBRARY_NOISE = range(6)


def rng_stream(seed: int, source: int) -> np.random.Generator:
    """Philox generator for one named noise source."""
    if seed < 0:
        raise DataError("seed must be a non-negative integer")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(source)])))


def psd_sqrt(mat, name: str = "matrix", tol: float = 1e-10) -> np.ndarray:
    """Symmetric square root of a PSD matrix; raises if it is not PSD."""
    mat = np.atleast_2d(np.asarray(mat, dtype=float))
    if mat.shape[0] != mat.shape[1]:
        raise DataError(f"{name} must be square")
    if not np.allclose(mat, mat.T, atol=1e-12 * max(1.0, np.abs(mat).max())):
        raise DataError(f"{name} must be symmetric")
    vals, vecs = np.linalg.eigh(0.5 * (mat + mat.T))
    scale = max(1.0, np.abs(vals).max())
    if vals.min() < -tol * scale:
        raise DataError(f"{name} is not positive semi-definite (min eigenvalue {vals.min():.3g})")
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


@dataclass
class OUMarketSpec:
    m: int
    n: int
    kappa: np.ndarray
    fbar: np.ndarray
    sigma_f: np.ndarray
    B: np.ndarray
    sigma_eps: np.ndarray
    obs_noise: np.ndarray
    dt: float
    T: int
    seed: int = 0
    f0: np.ndarray | None = None  # defaults to fbar

    def __post_init__(self):
        m, n = self.m, self.n
        self.kappa = np.atleast_2d(np.asarray(self.kappa, dtype=float))
        self.fbar = np.atleast_1d(np.asarray(self.fbar, dtype=float))
        self.sigma_f = np.atleast_2d(np.asarray(self.sigma_f, dtype=float))
        self.B = np.asarray(self.B, dtype=float).reshape(n, m)
        self.sigma_eps = np.atleast_2d(np.asarray(self.sigma_eps, dtype=float))
        self.obs_noise = np.atleast_2d(np.asarray(self.obs_noise, dtype=float))
        expected = {
            "kappa": (m, m),
            "fbar": (m,),
            "sigma_f": (m, m),
            "sigma_eps": (n, n),
            "obs_noise": (m, m),
        }
        for key, shape in expected.items():
            if getattr(self, key).shape != shape:
                raise DataError(f"{key} has shape {getattr(self, key).shape}, expected {shape}")
        if not self.dt > 0:
            raise DataError("dt must be positive")
        if self.T < 1:
            raise DataError("T must be at least 1")


@dataclass
class SynthOutput:
    drivers: np.ndarray  # T x m
    assets: np.ndarray  # T x n
    observations: np.ndarray  # T x d_Y
    true_betas: np.ndarray  # n x m
    extras: dict = field(default_factory=dict)


def _check_mean_reversion(kappa: np.ndarray) -> None:
    # kappa = 0 (pure Brownian drivers) is admitted; growth modes are not
    real = np.linalg.eigvals(kappa).real
    if real.min() < -1e-12:
        raise DataError("kappa has an eigenvalue with negative real part (explosive drivers)")


def gen_ou_market(spec: OUMarketSpec) -> SynthOutput:
    """Simulate drivers, asset return increments and driver observations.

    Row ``t`` of ``drivers`` holds the state after step ``t+1``. The asset
    increment over the same step uses the pre-step state (Ito convention) and
    the observation increment uses the post-step state.
    """
    _check_mean_reversion(spec.kappa)
    root_f = psd_sqrt(spec.sigma_f, "sigma_f")
    root_eps = psd_sqrt(spec.sigma_eps, "sigma_eps")
    root_obs = psd_sqrt(spec.obs_noise, "obs_noise")

    m, n, T, dt = spec.m, spec.n, spec.T, spec.dt
    sqdt = np.sqrt(dt)
    z_f = rng_stream(spec.seed, _DRIVER_NOISE).standard_normal((T, m))
    z_a = rng_stream(spec.seed, _ASSET_NOISE).standard_normal((T, n))
    z_y = rng_stream(spec.seed, _OBS_NOISE).standard_normal((T, m))

    drivers = np.empty((T, m))
    state = spec.fbar.copy() if spec.f0 is None else np.asarray(spec.f0, dtype=float).copy()
    pre = np.empty((T, m))
    for t in range(T):
        pre[t] = state
        state = state + spec.kappa @ (spec.fbar - state) * dt + sqdt * (root_f @ z_f[t])
        drivers[t] = state

    assets = pre @ spec.B.T * dt + sqdt * z_a @ root_eps.T
    observations = drivers * dt + sqdt * z_y @ root_obs.T
    return SynthOutput(drivers, assets, observations, spec.B.copy())


def gen_gaussian_scm(m: int, n: int, T: int, betas, sigma_d, psi, seed: int = 0) -> SynthOutput:
    """Draw ``D ~ N(0, sigma_d)`` i.i.d. and ``A = D betas^T + eps`` with diagonal noise."""
    betas = np.asarray(betas, dtype=float)
    if betas.ndim == 1 and m == 1:
        betas = betas[:, None]
    if betas.shape != (n, m):
        raise DataError(f"betas has shape {betas.shape}, expected {(n, m)}")
    sigma_d = np.atleast_2d(np.asarray(sigma_d, dtype=float))
    if sigma_d.shape != (m, m):
        raise DataError(f"sigma_d has shape {sigma_d.shape}, expected {(m, m)}")
    psi = np.broadcast_to(np.asarray(psi, dtype=float), (n,))
    if np.any(psi <= 0):
        raise DataError("idiosyncratic variances must be positive")
    root_d = psd_sqrt(sigma_d, "sigma_d")
    drivers = rng_stream(seed, _SCM_DRIVERS).standard_normal((T, m)) @ root_d.T
    eps = rng_stream(seed, _SCM_IDIO).standard_normal((T, n)) * np.sqrt(psi)
    assets = drivers @ betas.T + eps
    return SynthOutput(drivers, assets, drivers.copy(), betas.copy())


def business_dates(count: int, start: str = "2000-01-03") -> np.ndarray:
    """Consecutive weekdays starting at ``start``."""
    first = np.datetime64(start, "D")
    return np.busday_offset(first, np.arange(count), roll="forward")


def ou_market_spec(
    n: int = 10,
    m: int = 3,
    T: int = 2000,
    seed: int = 0,
    periods_per_year: int = 252,
    driver_halflife_years: float = 0.25,
    loading_scale: float = 2.0,
    idio_vol: float = 0.20,
    driver_obs_vol: float = 0.05,
) -> OUMarketSpec:
    """A daily OU market with unit-variance drivers and random loadings.

    Loadings are drawn from their own stream so the same ``seed`` yields the
    same cross-section for any ``T``.
    """
    rng = rng_stream(seed, _LIBRARY_NOISE + 1)
    dt = 1.0 / periods_per_year
    kappa_scalar = np.log(2.0) / driver_halflife_years
    loadings = loading_scale * (0.5 + rng.standard_normal((n, m)))
    return OUMarketSpec(
        m=m,
        n=n,
        kappa=kappa_scalar * np.eye(m),
        fbar=np.zeros(m),
        sigma_f=2.0 * kappa_scalar * np.eye(m),  # stationary variance 1
        B=loadings,
        sigma_eps=idio_vol**2 * np.eye(n),
        obs_noise=driver_obs_vol**2 * dt * np.eye(m),
        dt=dt,
        T=T,
        seed=seed,
        f0=np.zeros(m),
    )


def driver_library(out: SynthOutput, dt: float, n_noise: int, seed: int) -> np.ndarray:
    """Candidate library: noisy driver readings followed by ``n_noise`` AR(1) decoys.

    Readings are observation increments divided by ``dt``; decoys share the
    drivers' persistence so they cannot be rejected on smoothness alone.
    """
    readings = out.observations / dt
    T = readings.shape[0]
    rng = rng_stream(seed, _LIBRARY_NOISE)
    lag1 = 0.99
    decoys = np.empty((T, n_noise))
    state = rng.standard_normal(n_noise)
    shocks = rng.standard_normal((T, n_noise)) * np.sqrt(1.0 - lag1**2)
    for t in range(T):
        state = lag1 * state + shocks[t]
        decoys[t] = state
    return np.hstack([readings, decoys])


def write_market_csvs(
    out_dir: str | PathLike,
    out: SynthOutput,
    library: np.ndarray | None = None,
    start: str = "2000-01-03",
) -> dict[str, Path]:
    """Dump prices, drivers and (optionally) the library as wide CSVs.

    Prices are the cumulated asset increments starting at 100; the library and
    drivers are dated with the return dates (one row after the first price).
    """
    target = Path(out_dir)
    target.mkdir(parents=True, exist_ok=True)
    T, n = out.assets.shape
    dates = business_dates(T + 1, start)
    paths = {"assets": target / "assets.csv", "drivers": target / "drivers.csv"}
    write_wide_csv(paths["assets"], dates, [f"A{i}" for i in range(n)], cumulate(out.assets, 100.0))
    m = out.drivers.shape[1]
    write_wide_csv(paths["drivers"], dates[1:], [f"F{k}" for k in range(m)], out.drivers)
    if library is not None:
        paths["library"] = target / "library.csv"
        names = [f"X{k}" for k in range(library.shape[1])]
        write_wide_csv(paths["library"], dates[1:], names, library)
    return paths
