"""Experiment-level computations: sigma sweeps, polynomial minimum, Ehrenfest oracle, idler ratio."""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import minimize_scalar

from .model import ConfigError, ElectronField, NumericalError

log = logging.getLogger(__name__)

CONDITION_LIMIT = 1e12
FLAT_CURVATURE = 1e-10


@dataclass
class SweepRow:
    sigma: float
    energy: float
    stderr: float
    seed: int
    M: int
    converged: bool = True
    E1: float = float("nan")
    entropy: float = float("nan")


@dataclass
class SweepTable:
    rows: list = field(default_factory=list)

    def __post_init__(self):
        self.rows = sorted(self.rows, key=lambda r: r.sigma)
        s = [r.sigma for r in self.rows]
        if any(b <= a for a, b in zip(s, s[1:])):
            raise ConfigError("sigma values in a sweep must be distinct")
        if any(r.stderr < 0 for r in self.rows):
            raise ConfigError("negative standard error")

    @property
    def sigma(self) -> np.ndarray:
        return np.array([r.sigma for r in self.rows])

    @property
    def energy(self) -> np.ndarray:
        return np.array([r.energy for r in self.rows])

    @property
    def stderr(self) -> np.ndarray:
        return np.array([r.stderr for r in self.rows])

    def usable(self) -> "SweepTable":
        return SweepTable([r for r in self.rows if r.converged and np.isfinite(r.energy)])

    def raw_minimum(self) -> SweepRow:
        return min(self.rows, key=lambda r: r.energy)


@dataclass
class FitResult:
    degree: int
    coefficients: np.ndarray  # highest power first (numpy.polyval order)
    sigma_star: float
    energy_star: float
    residual_norm: float
    condition_number: float
    unique: bool = True


def sweep_seed(master_seed: int, sigma: float) -> int:
    """Seed for one sweep point, keyed by the sigma value (not its position in the list)."""
    return zlib.crc32(f"{int(master_seed)}:{float(sigma):.12g}".encode()) & 0x7FFFFFFF


def sigma_sweep(
    sigmas,
    run_point: Callable[[float, int], SweepRow],
    master_seed: int = 42,
    common_random_numbers: bool = True,
    executor=None,
) -> SweepTable:
    """Run one ground-state preparation per sigma and tabulate E2.

    ``run_point(sigma, seed)`` does the actual work.  With
    ``common_random_numbers`` every point reuses the master seed so the
    walkers see identical noise and the curve's shape is not swamped by
    sampling scatter; otherwise seeds are derived from (master_seed, sigma).
    Points that fail to converge are kept but marked.
    """
    sigmas = [float(s) for s in sigmas]
    if any(s <= 0 for s in sigmas):
        raise ConfigError("every sigma must be positive")
    seeds = [master_seed if common_random_numbers else sweep_seed(master_seed, s) for s in sigmas]
    if executor is None:
        rows = [_safe_point(run_point, s, sd) for s, sd in zip(sigmas, seeds)]
    else:
        futures = [executor.submit(_safe_point, run_point, s, sd) for s, sd in zip(sigmas, seeds)]
        rows = [f.result() for f in futures]
    return SweepTable(rows)


def _safe_point(run_point, sigma, seed) -> SweepRow:
    try:
        return run_point(sigma, seed)
    except NumericalError as exc:
        log.warning("sweep point sigma=%.4g failed: %s", sigma, exc)
        return SweepRow(sigma, float("nan"), 0.0, seed, 0, converged=False)


def polyfit_min(table: SweepTable, degree: int = 4) -> FitResult:
    """Least-squares polynomial through (sigma, E) and its minimum inside the swept range."""
    t = table.usable()
    s, e = t.sigma, t.energy
    if len(s) < degree + 1:
        raise ConfigError(f"need at least {degree + 1} usable points for a degree-{degree} fit, have {len(s)}")
    vander = np.vander(s, degree + 1)
    cond = float(np.linalg.cond(vander))
    if not np.isfinite(cond) or cond > CONDITION_LIMIT:
        raise NumericalError(f"ill-conditioned polynomial fit (condition number {cond:.3e})")
    coef, *_ = np.linalg.lstsq(vander, e, rcond=None)
    resid = float(np.linalg.norm(vander @ coef - e))
    lo, hi = float(s.min()), float(s.max())
    poly = np.poly1d(coef)
    curvature = float(np.max(np.abs(poly.deriv(2)(np.linspace(lo, hi, 64))))) if degree >= 2 else 0.0
    unique = curvature > FLAT_CURVATURE * max(1.0, float(np.max(np.abs(e))))
    if degree == 2 and coef[0] > 0:
        x_star = float(np.clip(-coef[1] / (2 * coef[0]), lo, hi))
    else:
        # dense scan to bracket the global minimum, then polish
        grid = np.linspace(lo, hi, 2001)
        m = int(np.argmin(poly(grid)))
        a, b = grid[max(m - 1, 0)], grid[min(m + 1, len(grid) - 1)]
        if b > a:
            res = minimize_scalar(poly, bounds=(a, b), method="bounded", options={"xatol": 1e-12})
            x_star = float(res.x) if poly(res.x) <= poly(grid[m]) else float(grid[m])
        else:
            x_star = float(grid[m])
    return FitResult(degree, coef, x_star, float(poly(x_star)), resid, cond, unique)


# -- Ehrenfest oracle ---------------------------------------------------------


def ehrenfest_closed_form(f: ElectronField, confinement: float, t) -> np.ndarray:
    """<x>(t) for x'' = -2c x + E(t), x = x' = 0 up to t_on, sine drive.

    Off resonance the response is particular + homogeneous; at resonance
    (omega^2 = 2c) the particular solution is secular.
    """
    if not confinement > 0:
        raise ConfigError("confinement must be positive")
    t = np.asarray(t, dtype=float)
    Om = np.sqrt(2 * confinement)
    w, E0 = f.omega, f.amplitude
    s = t - f.t_on
    phi = f.phase + w * f.t_on
    if np.isclose(w, Om, rtol=1e-12, atol=0):
        x = -(E0 * s / (2 * Om)) * np.cos(Om * s + phi) + E0 * np.cos(phi) / (2 * Om**2) * np.sin(Om * s)
    else:
        A = E0 / (Om**2 - w**2)
        x = A * np.sin(w * s + phi) - A * np.sin(phi) * np.cos(Om * s) - A * w * np.cos(phi) / Om * np.sin(Om * s)
    return np.where(s >= 0, x, 0.0)


def ehrenfest_rk4(drive: Callable[[float], float], confinement: float, T: float, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """RK4 integration of x'' = -2c x + E(t) from rest; works for any drive."""
    n = int(round(T / dt))
    times = np.arange(n + 1) * dt
    y = np.zeros(2)
    out = np.zeros(n + 1)
    w2 = 2 * confinement

    def rhs(t, y):
        return np.array([y[1], -w2 * y[0] + drive(t)])

    for m in range(n):
        t = times[m]
        k1 = rhs(t, y)
        k2 = rhs(t + dt / 2, y + dt / 2 * k1)
        k3 = rhs(t + dt / 2, y + dt / 2 * k2)
        k4 = rhs(t + dt, y + dt * k3)
        y = y + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        out[m + 1] = y[0]
    return times, out


def ehrenfest_oracle(f: ElectronField, confinement: float, T: float, dt: float, method: str = "closed") -> tuple[np.ndarray, np.ndarray]:
    """Reference dipole series on t = 0, dt, ..., T."""
    if method == "closed":
        times = np.arange(int(round(T / dt)) + 1) * dt
        return times, ehrenfest_closed_form(f, confinement, times)
    if method == "rk4":
        return ehrenfest_rk4(lambda t: float(f(t)), confinement, T, dt)
    raise ConfigError(f"unknown oracle method {method!r}")


# -- spatial nonlocality vs nonlocal causality ------------------------------


@dataclass
class IdlerRatio:
    ratio: float
    numerator: float
    denominator: float
    infinite: bool = False


def idler_ratio(interacting_idler: np.ndarray, nonint_idler_displacements: np.ndarray) -> IdlerRatio:
    """Peak induced idler dipole (interacting) over peak idler trajectory excursion (non-interacting).

    Inputs are collapse-subtracted series: the idler dipole d2(t) of the
    interacting run and the idler displacements x2^k(t) - x2^k(0) of the
    non-interacting run, any shape.
    """
    num = float(np.nanmax(np.abs(interacting_idler)))
    den = float(np.nanmax(np.abs(nonint_idler_displacements)))
    if den == 0.0:
        return IdlerRatio(float("inf"), num, den, True)
    return IdlerRatio(num / den, num, den)


def bootstrap_spread(values) -> tuple[float, float]:
    """(sample std, standard error of the std) for a set of repeated estimates."""
    v = np.asarray(values, dtype=float)
    n = len(v)
    if n < 2:
        raise ConfigError("need at least two repeats")
    sd = float(v.std(ddof=1))
    return sd, sd / np.sqrt(2 * (n - 1))
