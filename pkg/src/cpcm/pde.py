"""One-dimensional Fokker-Planck and HJB finite-difference solvers.

Both solvers are explicit. The Fokker-Planck scheme is a finite-volume update
with slope-limited upwind drift fluxes and central diffusion fluxes, which
conserves mass exactly up to round-off. The HJB solver sweeps backward from the exponential
utility terminal condition, choosing the control pointwise in closed form and
sub-stepping internally so each explicit step stays inside its stability
bound.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from os import PathLike
from typing import Callable

import numpy as np

from .errors import ConfigError, DataError, NumericalError

logger = logging.getLogger(__name__)

Coefficient = float | Callable[[np.ndarray, float], np.ndarray]


@dataclass(frozen=True)
class Grid1D:
    x_min: float = -0.5
    x_max: float = 0.5
    nx: int = 401
    dt: float = 1.0 / 252.0
    nt: int = 21

    def __post_init__(self):
        if not self.x_min < self.x_max:
            raise ConfigError("x_min must be below x_max")
        if self.nx < 3:
            raise ConfigError("nx must be at least 3")
        if not self.dt > 0 or self.nt < 0:
            raise ConfigError("dt must be positive and nt non-negative")

    @property
    def x(self) -> np.ndarray:
        return np.linspace(self.x_min, self.x_max, self.nx)

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / (self.nx - 1)

    def cfl(self, sigma2_max: float) -> float:
        """Diffusion number ``sigma^2 dt / dx^2``."""
        return float(sigma2_max * self.dt / self.dx**2)


def _evaluate(coef: Coefficient, x: np.ndarray, t: float) -> np.ndarray:
    value = coef(x, t) if callable(coef) else coef
    return np.broadcast_to(np.asarray(value, dtype=float), x.shape)


def _limited_slopes(rho: np.ndarray) -> np.ndarray:
    """Van Leer limited cell slopes (zero at the walls and at extrema)."""
    left = rho[1:-1] - rho[:-2]
    right = rho[2:] - rho[1:-1]
    prod = left * right
    denom = np.where(left + right == 0.0, 1.0, left + right)
    slopes = np.zeros_like(rho)
    slopes[1:-1] = np.where(prod > 0.0, 2.0 * prod / denom, 0.0)
    return slopes


def solve_fp_1d(
    grid: Grid1D,
    mu: Coefficient,
    sigma2: Coefficient,
    rho0,
    max_cfl: float = 0.5,
    limiter: bool = True,
) -> np.ndarray:
    """Evolve a density under ``rho_t = -(mu rho)_x + 0.5 (sigma2 rho)_xx`` with zero-flux walls.

    Drift fluxes take the upwind cell's value at the face, reconstructed with a
    van Leer limited slope (``limiter=False`` gives plain first-order upwind).
    Returns an ``(nt + 1) x nx`` array whose first row is ``rho0``. Refuses to
    run when the diffusion number or the advective Courant number exceeds
    ``max_cfl``.
    """
    x, dx, dt = grid.x, grid.dx, grid.dt
    rho = np.asarray(rho0, dtype=float).copy()
    if rho.shape != x.shape:
        raise DataError(f"rho0 must have {grid.nx} entries")
    if np.any(rho < 0):
        raise DataError("rho0 must be non-negative")
    mass0 = rho.sum() * dx
    if abs(mass0 - 1.0) > 1e-8:
        raise DataError(f"rho0 must integrate to 1 (got {mass0:.10f})")
    faces = 0.5 * (x[:-1] + x[1:])
    out = np.empty((grid.nt + 1, grid.nx))
    out[0] = rho
    for k in range(grid.nt):
        t = k * dt
        s2 = _evaluate(sigma2, x, t)
        drift = _evaluate(mu, faces, t)
        diffusion_number = grid.cfl(s2.max())
        courant = float(np.abs(drift).max() * dt / dx)
        if diffusion_number > max_cfl or courant > max_cfl:
            raise NumericalError(
                f"explicit step unstable: sigma^2 dt/dx^2 = {diffusion_number:.3g}, "
                f"|mu| dt/dx = {courant:.3g} (limit {max_cfl}); refine dt"
            )
        if limiter:
            slopes = _limited_slopes(rho)
            left_state = rho[:-1] + 0.5 * slopes[:-1]
            right_state = rho[1:] - 0.5 * slopes[1:]
        else:
            left_state, right_state = rho[:-1], rho[1:]
        upwind = np.where(drift > 0, drift * left_state, drift * right_state)
        diff = -0.5 * np.diff(s2 * rho) / dx
        flux = np.concatenate([[0.0], upwind + diff, [0.0]])
        previous = rho.sum()
        rho = rho - dt / dx * np.diff(flux)
        if abs(rho.sum() - previous) * dx > 1e-6:
            logger.warning("mass drift %.3g at step %d", abs(rho.sum() - previous) * dx, k)
        out[k + 1] = rho
    return out


def density_moments(grid: Grid1D, rho: np.ndarray) -> tuple[float, float, float]:
    """Mass, mean and variance of a gridded density."""
    x, dx = grid.x, grid.dx
    mass = float(rho.sum() * dx)
    mean = float((x * rho).sum() * dx / mass)
    var = float(((x - mean) ** 2 * rho).sum() * dx / mass)
    return mass, mean, var


@dataclass
class HJBResult:
    u: np.ndarray  # (nt + 1) x nx, row nt is the terminal condition
    theta_star: np.ndarray  # (nt + 1) x nx
    theta_tail: float
    s_tau: float
    x: np.ndarray
    substeps: int = 0
    flags: list[str] = field(default_factory=list)


def _derivatives(u: np.ndarray, dx: float) -> tuple[np.ndarray, np.ndarray]:
    ux = np.empty_like(u)
    uxx = np.empty_like(u)
    ux[1:-1] = (u[2:] - u[:-2]) / (2.0 * dx)
    ux[0] = (u[1] - u[0]) / dx
    ux[-1] = (u[-1] - u[-2]) / dx
    uxx[1:-1] = (u[2:] - 2.0 * u[1:-1] + u[:-2]) / dx**2
    uxx[0] = (u[0] - 2.0 * u[1] + u[2]) / dx**2
    uxx[-1] = (u[-1] - 2.0 * u[-2] + u[-3]) / dx**2
    return ux, uxx


def _drift_term(u: np.ndarray, b: np.ndarray, d: np.ndarray, ux: np.ndarray, dx: float) -> np.ndarray:
    """``b u_x`` with central differences where the cell Peclet number ``|b| dx / d``
    is at most 2 and upwind differences (toward ``sign(b)``) elsewhere."""
    term = b * ux
    fwd = np.zeros_like(u)
    bwd = np.zeros_like(u)
    fwd[1:-1] = (u[2:] - u[1:-1]) / dx
    bwd[1:-1] = (u[1:-1] - u[:-2]) / dx
    upwind = np.abs(b) * dx > 2.0 * d
    upwind[[0, -1]] = False
    return np.where(upwind, b * np.where(b > 0, fwd, bwd), term)


def optimal_control(ux, uxx, mu: float, sigma2: float, bound: float) -> np.ndarray:
    """Pointwise maximizer of ``mu th ux + 0.5 sigma2 th^2 uxx`` over ``|th| <= bound``.

    Concave nodes use the stationary point (clipped); elsewhere the objective is
    convex in ``th`` and the best of ``{0, +bound, -bound}`` is taken. Ties
    prefer ``0`` over a bound and ``+bound`` over ``-bound``.
    """
    ux = np.asarray(ux, dtype=float)
    uxx = np.asarray(uxx, dtype=float)
    concave = uxx < 0
    safe = np.where(concave, uxx, -1.0)
    interior = np.clip(-(mu / sigma2) * ux / safe, -bound, bound)

    def objective(th):
        return mu * th * ux + 0.5 * sigma2 * th**2 * uxx

    up, down = objective(bound), objective(-bound)
    edge = np.where(np.maximum(up, down) > 0.0, np.where(up >= down, bound, -bound), 0.0)
    return np.where(concave, interior, edge)


def solve_hjb_1d(
    grid: Grid1D,
    mu_path,
    sigma2_path,
    gamma: float,
    theta_bound: float = 10.0,
    r: float = 0.0,
    x0: float = 0.0,
    s_min: float = 0.5,
    s_max: float = 1.5,
    stability: float = 0.45,
) -> HJBResult:
    """Backward sweep of ``u_t + max_th {mu th u_x + 0.5 sigma2 th^2 u_xx} - r u = 0``.

    ``mu_path[k]`` and ``sigma2_path[k]`` apply on ``[t_k, t_{k+1})``. The
    terminal condition is ``-exp(-gamma x)``. Explicit substeps respect the
    diffusion and advection limits; the drift term switches to upwind
    differences where the cell Peclet number exceeds 2. ``theta_tail`` is the control at
    the last decision time ``t_{nt-1}`` interpolated at ``x0``.
    """
    mu_path = np.atleast_1d(np.asarray(mu_path, dtype=float))
    sigma2_path = np.atleast_1d(np.asarray(sigma2_path, dtype=float))
    nt = grid.nt
    if mu_path.shape != (nt,) or sigma2_path.shape != (nt,):
        raise DataError(f"mu and sigma2 paths must have length nt={nt}")
    if nt < 1:
        raise DataError("HJB needs at least one time step")
    if np.any(sigma2_path <= 0):
        raise DataError("sigma2 must be positive on the whole path")
    if not gamma > 0 or not theta_bound > 0:
        raise ConfigError("gamma and theta_bound must be positive")
    if s_min > s_max:
        raise ConfigError("s_min must not exceed s_max")

    x, dx = grid.x, grid.dx
    u = np.empty((nt + 1, grid.nx))
    theta = np.empty((nt + 1, grid.nx))
    u[nt] = -np.exp(-gamma * x)
    ux, uxx = _derivatives(u[nt], dx)
    theta[nt] = optimal_control(ux, uxx, mu_path[-1], sigma2_path[-1], theta_bound)
    substeps = 0
    nonconcave = 0.0
    current = u[nt].copy()
    for k in range(nt - 1, -1, -1):
        mu, s2 = mu_path[k], sigma2_path[k]
        remaining = grid.dt
        while remaining > 1e-15 * grid.dt:
            ux, uxx = _derivatives(current, dx)
            th = optimal_control(ux, uxx, mu, s2, theta_bound)
            th_max = max(np.abs(th).max(), 1e-12)
            h = min(
                remaining,
                stability * dx**2 / (s2 * th_max**2),
                stability * dx / (abs(mu) * th_max + 1e-300),
            )
            if r > 0:
                h = min(h, stability / r)
            current = current + h * (_drift_term(current, mu * th, 0.5 * s2 * th**2, ux, dx) + 0.5 * s2 * th**2 * uxx - r * current)
            remaining -= h
            substeps += 1
        if not np.all(np.isfinite(current)):
            raise NumericalError(f"HJB sweep produced non-finite values at step {k}")
        u[k] = current
        ux, uxx = _derivatives(current, dx)
        theta[k] = optimal_control(ux, uxx, mu, s2, theta_bound)
        nonconcave = max(nonconcave, float(np.mean(uxx[1:-1] >= 0)))

    flags = []
    if nonconcave > 0.10:
        flags.append("concavity_lost")
        logger.warning("u_xx >= 0 on %.0f%% of interior nodes", 100 * nonconcave)
    theta_tail = float(np.interp(x0, x, theta[nt - 1]))
    s_tau = float(np.clip(1.0 + theta_tail, s_min, s_max))
    return HJBResult(u, theta, theta_tail, s_tau, x, substeps, flags)


def amplitude_scale(result: HJBResult | float, s_min: float = 0.5, s_max: float = 1.5) -> float:
    """``clip(1 + theta_tail, s_min, s_max)``."""
    if s_min > s_max:
        raise ConfigError("s_min must not exceed s_max")
    tail = result.theta_tail if isinstance(result, HJBResult) else float(result)
    return float(np.clip(1.0 + tail, s_min, s_max))


def write_surface_csv(path: str | PathLike, x: np.ndarray, surface: np.ndarray, dt: float) -> None:
    """Long-format dump (t, x, value) of a solver surface."""
    t = np.arange(surface.shape[0]) * dt
    tt, xx = np.meshgrid(t, x, indexing="ij")
    table = np.column_stack([tt.ravel(), xx.ravel(), surface.ravel()])
    np.savetxt(path, table, delimiter=",", header="t,x,value", comments="", fmt="%.10g")
