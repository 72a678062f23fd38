"""Numerically exact two-electron solver on the (x1, x2) configuration-space grid.

Strang split-step Fourier propagation in real and imaginary time, energy
expectation values, de Broglie-Bohm trajectories guided by the full two-body
wave function, and dipole monitoring.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator, Sequence

import numpy as np

from .model import (
    ConfigError,
    FieldSpec,
    Grid2D,
    NumericalError,
    RngStream,
    SystemSpec,
    confinement_potential,
    soft_core_potential,
)

log = logging.getLogger(__name__)

REAL = "real"
IMAGINARY = "imaginary"

NODE_GUARD = 1e-12
EDGE_PROBABILITY_LIMIT = 1e-6
EDGE_BAND = 0.05  # fraction of the span on each side counted as "edge"


@dataclass
class WaveFunction2D:
    grid: Grid2D
    amplitudes: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        self.amplitudes = np.asarray(self.amplitudes, dtype=complex)
        if self.amplitudes.shape != self.grid.shape:
            raise ConfigError(f"amplitude shape {self.amplitudes.shape} != grid shape {self.grid.shape}")

    def norm(self) -> float:
        return float(np.sum(np.abs(self.amplitudes) ** 2) * self.grid.cell)

    def normalized(self) -> "WaveFunction2D":
        return replace(self, amplitudes=self.amplitudes / np.sqrt(self.norm()))

    def density(self) -> np.ndarray:
        return np.abs(self.amplitudes) ** 2

    def mean_positions(self) -> np.ndarray:
        """<x1>, <x2> by grid quadrature (assumes unit norm)."""
        rho = self.density() * self.grid.cell
        p1 = rho.sum(axis=1)
        p2 = rho.sum(axis=0)
        return np.array([p1 @ self.grid.axis1.x, p2 @ self.grid.axis2.x]) / rho.sum()

    def swapped(self) -> "WaveFunction2D":
        """Psi(x2, x1); only meaningful on square grids."""
        return replace(self, amplitudes=self.amplitudes.T.copy())

    def edge_probability(self, band: float = EDGE_BAND) -> float:
        rho = self.density() * self.grid.cell
        m1 = np.abs(self.grid.axis1.x) >= self.grid.axis1.span * (0.5 - band)
        m2 = np.abs(self.grid.axis2.x) >= self.grid.axis2.span * (0.5 - band)
        return float(rho[m1, :].sum() + rho[~m1][:, m2].sum())

    def copy(self) -> "WaveFunction2D":
        return WaveFunction2D(self.grid, self.amplitudes.copy(), self.time)


@dataclass(frozen=True)
class PropagationSchedule:
    dt: float
    n_steps: int
    snapshot_stride: int = 1
    mode: str = REAL

    def __post_init__(self):
        if not self.dt > 0:
            raise ConfigError("dt must be positive")
        if self.n_steps < 0:
            raise ConfigError("n_steps must be >= 0")
        if self.snapshot_stride < 1:
            raise ConfigError("snapshot_stride must be >= 1")
        if self.mode not in (REAL, IMAGINARY):
            raise ConfigError(f"mode must be 'real' or 'imaginary', got {self.mode!r}")

    @classmethod
    def for_duration(cls, duration: float, dt: float, snapshot_stride: int = 1, mode: str = REAL):
        return cls(dt, int(round(duration / dt)), snapshot_stride, mode)


@dataclass
class DipoleSeries:
    times: np.ndarray
    dipoles: np.ndarray  # (n_times, n_electrons)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.dipoles = np.asarray(self.dipoles, dtype=float).reshape(len(self.times), -1)

    def d(self, i: int) -> np.ndarray:
        return self.dipoles[:, i - 1]

    def __len__(self):
        return len(self.times)


@dataclass
class TrajectorySet:
    """Bohmian trajectories; ``positions[n, k] = (x1, x2)`` of trajectory k at times[n].

    ``flags[k]`` counts node-guard events; ``exited[k]`` marks trajectories
    that left the grid (their later positions are NaN).
    """

    times: np.ndarray
    positions: np.ndarray  # (n_times, K, 2)
    flags: np.ndarray = None
    exited: np.ndarray = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.positions = np.asarray(self.positions, dtype=float)
        K = self.positions.shape[1]
        if self.flags is None:
            self.flags = np.zeros(K, dtype=int)
        if self.exited is None:
            self.exited = np.zeros(K, dtype=bool)

    @property
    def n_trajectories(self) -> int:
        return self.positions.shape[1]

    def x(self, i: int) -> np.ndarray:
        """(n_times, K) coordinate of electron i."""
        return self.positions[:, :, i - 1]

    def displacement(self, i: int) -> np.ndarray:
        return self.x(i) - self.x(i)[0]


def _same_axis(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape or not np.allclose(a, b, rtol=0, atol=1e-12):
        raise ConfigError("time axes of the two runs differ")


def subtract_reference(run_a, run_b):
    """Pointwise ``run_a - run_b`` for two DipoleSeries or two TrajectorySets.

    Used to remove the field-independent relaxation ("collapse") that follows
    switching the interaction off, by subtracting a companion field-free run.
    """
    if type(run_a) is not type(run_b):
        raise ConfigError("cannot subtract runs of different kinds")
    _same_axis(run_a.times, run_b.times)
    if isinstance(run_a, DipoleSeries):
        return DipoleSeries(run_a.times.copy(), run_a.dipoles - run_b.dipoles)
    if isinstance(run_a, TrajectorySet):
        if run_a.positions.shape != run_b.positions.shape:
            raise ConfigError("trajectory sets have different shapes")
        return TrajectorySet(
            run_a.times.copy(),
            run_a.positions - run_b.positions,
            run_a.flags + run_b.flags,
            run_a.exited | run_b.exited,
        )
    raise TypeError(f"unsupported run type {type(run_a).__name__}")


def init_gaussian(grid: Grid2D, width: float = 1.0, center=(0.0, 0.0)) -> WaveFunction2D:
    if not width > 0:
        raise ConfigError(f"width must be positive, got {width!r}")
    x1, x2 = grid.mesh()
    amp = np.exp(-((x1 - center[0]) ** 2 + (x2 - center[1]) ** 2) / (2 * width**2))
    return WaveFunction2D(grid, amp.astype(complex)).normalized()


def harmonic_ground_state(grid: Grid2D, spec: SystemSpec) -> WaveFunction2D:
    """Product of single-oscillator ground states for V = c*x**2 (no interaction)."""
    omega = np.sqrt(2 * spec.confinement_strength)
    x1, x2 = grid.mesh()
    return WaveFunction2D(grid, np.exp(-omega * (x1**2 + x2**2) / 2).astype(complex)).normalized()


def static_potential(grid: Grid2D, spec: SystemSpec) -> np.ndarray:
    x1, x2 = grid.mesh()
    return confinement_potential(x1, spec) + confinement_potential(x2, spec) + soft_core_potential(x1, x2, spec)


def kinetic_symbol(grid: Grid2D) -> np.ndarray:
    k1, k2 = grid.axis1.k, grid.axis2.k
    return 0.5 * (k1[:, None] ** 2 + k2[None, :] ** 2)


class SplitStepPropagator:
    """Strang splitting exp(-iV dt/2) exp(-iT dt) exp(-iV dt/2) on a 2D grid.

    In imaginary mode the factors become exp(-V dtau/2) etc. and the state is
    renormalised after every step. The external dipole potential is sampled at
    the mid-step time.
    """

    def __init__(self, grid: Grid2D, spec: SystemSpec, fields: FieldSpec | None, dt: float, mode: str = REAL):
        if mode not in (REAL, IMAGINARY):
            raise ConfigError(f"unknown mode {mode!r}")
        self.grid, self.spec, self.dt, self.mode = grid, spec, dt, mode
        self.fields = fields if fields is not None else FieldSpec.off(2)
        self.v_static = static_potential(grid, spec)
        self.x1, self.x2 = grid.axis1.x[:, None], grid.axis2.x[None, :]
        c = -1j if mode == REAL else -1.0
        self._c = c
        self.kin_factor = np.exp(c * dt * kinetic_symbol(grid))
        self._static_half = np.exp(c * 0.5 * dt * self.v_static)

    def _half_potential(self, t_mid: float) -> np.ndarray:
        if self.fields.is_off:
            return self._static_half
        e1 = float(self.fields[1](t_mid))
        e2 = float(self.fields[2](t_mid))
        if e1 == 0.0 and e2 == 0.0:
            return self._static_half
        v_ext = -(e1 * self.x1 + e2 * self.x2)
        return self._static_half * np.exp(self._c * 0.5 * self.dt * v_ext)

    def step(self, amp: np.ndarray, t: float) -> np.ndarray:
        half = self._half_potential(t + 0.5 * self.dt)
        out = half * np.fft.ifft2(self.kin_factor * np.fft.fft2(half * amp))
        if self.mode == IMAGINARY:
            nrm = np.sqrt(np.sum(np.abs(out) ** 2) * self.grid.cell)
            if not np.isfinite(nrm) or nrm == 0:
                raise NumericalError(f"imaginary-time step at tau={t:.6g} produced norm {nrm}")
            out /= nrm
        elif not np.isfinite(out[0, 0]) or not np.isfinite(np.sum(out).real):
            raise NumericalError(f"non-finite amplitudes after real-time step at t={t:.6g}")
        return out


def split_step(
    psi: WaveFunction2D,
    dt: float,
    spec: SystemSpec,
    fields: FieldSpec | None = None,
    mode: str = REAL,
) -> WaveFunction2D:
    """Single Strang step from ``psi.time``; convenient but rebuilds the propagator each call."""
    prop = SplitStepPropagator(psi.grid, spec, fields, dt, mode)
    t_next = psi.time + dt if mode == REAL else psi.time
    return WaveFunction2D(psi.grid, prop.step(psi.amplitudes, psi.time), t_next)


def apply_hamiltonian(psi: WaveFunction2D, spec: SystemSpec, v_static: np.ndarray | None = None) -> np.ndarray:
    if v_static is None:
        v_static = static_potential(psi.grid, spec)
    kin = np.fft.ifft2(kinetic_symbol(psi.grid) * np.fft.fft2(psi.amplitudes))
    return kin + v_static * psi.amplitudes


def energy_expectation(psi: WaveFunction2D, spec: SystemSpec, v_static: np.ndarray | None = None) -> float:
    """<Psi|H|Psi>/<Psi|Psi> with the field-free Hamiltonian and spectral kinetic energy."""
    h_psi = apply_hamiltonian(psi, spec, v_static)
    raw = np.vdot(psi.amplitudes, h_psi) / np.vdot(psi.amplitudes, psi.amplitudes)
    if abs(raw.imag) > 1e-10 * max(1.0, abs(raw.real)):
        raise NumericalError(f"energy expectation has imaginary part {raw.imag:.3e}")
    return float(raw.real)


@dataclass
class RelaxationResult:
    psi: WaveFunction2D
    energy: float
    n_steps: int
    energies: np.ndarray  # energy after every step
    snapshots: list = field(default_factory=list)


def relax_ground_state(
    psi0: WaveFunction2D,
    spec: SystemSpec,
    dtau: float = 0.002,
    energy_tol: float = 1e-10,
    check_stride: int = 50,
    max_steps: int = 50_000,
    snapshot_stride: int | None = None,
) -> RelaxationResult:
    """Imaginary-time relaxation until |E(n) - E(n - check_stride)| < energy_tol.

    With ``snapshot_stride`` set, intermediate states are kept so the
    entanglement build-up can be traced.  Snapshot ``time`` is the elapsed
    imaginary time tau.
    """
    prop = SplitStepPropagator(psi0.grid, spec, None, dtau, IMAGINARY)
    amp = psi0.normalized().amplitudes
    energies = []
    snaps = []
    e_prev = None
    for n in range(1, max_steps + 1):
        amp = prop.step(amp, 0.0)
        wf = WaveFunction2D(psi0.grid, amp, n * dtau)
        e = energy_expectation(wf, spec, prop.v_static)
        energies.append(e)
        if snapshot_stride and n % snapshot_stride == 0:
            snaps.append(wf.copy())
        if n % check_stride == 0:
            if e_prev is not None and abs(e - e_prev) < energy_tol:
                log.info("exact relaxation converged after %d steps, E=%.10f", n, e)
                return RelaxationResult(wf, e, n, np.array(energies), snaps)
            e_prev = e
    raise NumericalError(f"imaginary-time relaxation did not converge within {max_steps} steps")


def iter_real(
    psi: WaveFunction2D,
    spec: SystemSpec,
    fields: FieldSpec,
    schedule: PropagationSchedule,
    edge_limit: float = EDGE_PROBABILITY_LIMIT,
) -> Iterator[WaveFunction2D]:
    """Yield the initial state and every ``snapshot_stride``-th state of a real-time run."""
    if schedule.mode != REAL:
        raise ConfigError("iter_real needs a real-time schedule")
    prop = SplitStepPropagator(psi.grid, spec, fields, schedule.dt, REAL)
    amp = psi.amplitudes.copy()
    t0 = psi.time
    yield WaveFunction2D(psi.grid, amp.copy(), t0)
    for n in range(1, schedule.n_steps + 1):
        amp = prop.step(amp, t0 + (n - 1) * schedule.dt)
        if n % schedule.snapshot_stride == 0 or n == schedule.n_steps:
            wf = WaveFunction2D(psi.grid, amp.copy(), t0 + n * schedule.dt)
            edge = wf.edge_probability()
            if edge > edge_limit:
                raise NumericalError(f"edge probability {edge:.2e} exceeds {edge_limit:.0e} at t={wf.time:.4f}")
            yield wf


@dataclass
class RealTimeRun:
    snapshots: list
    dipoles: DipoleSeries
    final: WaveFunction2D


def propagate_real(
    psi: WaveFunction2D,
    spec: SystemSpec,
    fields: FieldSpec,
    schedule: PropagationSchedule,
    keep_snapshots: bool = True,
) -> RealTimeRun:
    snaps, times, dips = [], [], []
    wf = psi
    for wf in iter_real(psi, spec, fields, schedule):
        times.append(wf.time)
        dips.append(wf.mean_positions())
        if keep_snapshots:
            snaps.append(wf)
    return RealTimeRun(snaps, DipoleSeries(np.array(times), np.array(dips)), wf)


# -- Bohmian mechanics -------------------------------------------------------


def spectral_gradient(psi: WaveFunction2D) -> tuple[np.ndarray, np.ndarray]:
    f = np.fft.fft2(psi.amplitudes)
    k1, k2 = psi.grid.axis1.k, psi.grid.axis2.k
    g1 = np.fft.ifft2(1j * k1[:, None] * f)
    g2 = np.fft.ifft2(1j * k2[None, :] * f)
    return g1, g2


def _bilinear(grid: Grid2D, arrays: Sequence[np.ndarray], pts: np.ndarray) -> list[np.ndarray]:
    a1, a2 = grid.axis1, grid.axis2
    u = (pts[:, 0] - a1.x_min) / a1.dx
    w = (pts[:, 1] - a2.x_min) / a2.dx
    i = np.clip(np.floor(u).astype(int), 0, a1.n_points - 2)
    j = np.clip(np.floor(w).astype(int), 0, a2.n_points - 2)
    fu, fw = u - i, w - j
    out = []
    for arr in arrays:
        out.append(
            arr[i, j] * (1 - fu) * (1 - fw)
            + arr[i + 1, j] * fu * (1 - fw)
            + arr[i, j + 1] * (1 - fu) * fw
            + arr[i + 1, j + 1] * fu * fw
        )
    return out


class VelocityField:
    """Bohmian velocity Im[grad Psi / Psi] for one snapshot, evaluated off-grid."""

    def __init__(self, psi: WaveFunction2D, node_guard: float = NODE_GUARD):
        self.psi = psi
        self.grid = psi.grid
        self.g1, self.g2 = spectral_gradient(psi)
        self.threshold = node_guard * float(np.max(psi.density()))

    def __call__(self, pts, previous=None) -> tuple[np.ndarray, np.ndarray]:
        """Return (velocities (K, 2), node flags (K,)).

        At points where |Psi|^2 falls below the node guard the velocity from
        ``previous`` (or zero) is returned and the flag is set.
        """
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        p, g1, g2 = _bilinear(self.grid, (self.psi.amplitudes, self.g1, self.g2), pts)
        dens = np.abs(p) ** 2
        near_node = dens < self.threshold
        safe = np.where(near_node, 1.0, p)
        v = np.stack([(g1 / safe).imag, (g2 / safe).imag], axis=1)
        if near_node.any():
            fallback = np.zeros_like(v) if previous is None else np.asarray(previous, dtype=float)
            v[near_node] = fallback[near_node]
        return v, near_node


def bohm_velocity(psi: WaveFunction2D, point) -> np.ndarray:
    """Velocity (v1, v2) at a single configuration-space point."""
    v, _ = VelocityField(psi)(np.asarray(point, dtype=float).reshape(1, 2))
    return v[0]


def sample_density(psi: WaveFunction2D, K: int, rng: RngStream) -> np.ndarray:
    """Draw K points from |Psi|^2: marginal in x1, then x2 conditional on the x1 cell.

    Each point is jittered uniformly within its grid cell.
    """
    if K < 1:
        raise ConfigError("K must be >= 1")
    g = psi.grid
    rho = psi.density()
    p1 = rho.sum(axis=1)
    cdf1 = np.cumsum(p1) / p1.sum()
    u = rng.uniform((K, 4))
    i = np.minimum(np.searchsorted(cdf1, u[:, 0], side="right"), g.axis1.n_points - 1)
    rows = rho[i]
    cdf2 = np.cumsum(rows, axis=1)
    cdf2 /= cdf2[:, -1:]
    j = np.minimum((cdf2 < u[:, 1:2]).sum(axis=1), g.axis2.n_points - 1)
    x1 = g.axis1.x[i] + (u[:, 2] - 0.5) * g.axis1.dx
    x2 = g.axis2.x[j] + (u[:, 3] - 0.5) * g.axis2.dx
    x1 = np.clip(x1, g.axis1.x_min, g.axis1.x_max)
    x2 = np.clip(x2, g.axis2.x_min, g.axis2.x_max)
    return np.stack([x1, x2], axis=1)


def evolve_trajectories(snapshots: Iterable[WaveFunction2D], start_points) -> TrajectorySet:
    """Integrate dX/dt = Im[grad Psi/Psi] through a time-ordered snapshot stream.

    Midpoint (RK2) scheme: the velocity at the half step is the average of the
    fields of the two bracketing snapshots, i.e. linear interpolation in time.
    ``snapshots`` may be a generator, so long runs need not be held in memory.
    """
    it = iter(snapshots)
    try:
        prev = next(it)
    except StopIteration:
        raise ConfigError("no snapshots supplied") from None
    grid = prev.grid
    X = np.array(start_points, dtype=float).reshape(-1, 2)
    K = len(X)
    flags = np.zeros(K, dtype=int)
    exited = ~(grid.axis1.contains(X[:, 0]) & grid.axis2.contains(X[:, 1]))
    X[exited] = np.nan
    times, positions = [prev.time], [X.copy()]
    vf_prev = VelocityField(prev)
    v_last = np.zeros_like(X)
    for snap in it:
        h = snap.time - prev.time
        if not h > 0:
            raise ConfigError("snapshot times must be strictly increasing")
        vf_next = VelocityField(snap)
        alive = ~exited
        v0, n0 = vf_prev(X[alive], v_last[alive])
        mid = X[alive] + 0.5 * h * v0
        va, na = vf_prev(mid, v0)
        vb, nb = vf_next(mid, v0)
        vmid = 0.5 * (va + vb)
        X[alive] = X[alive] + h * vmid
        v_last[alive] = vmid
        flags[alive] += (n0 | na | nb).astype(int)
        out = alive & ~(grid.axis1.contains(X[:, 0]) & grid.axis2.contains(X[:, 1]))
        if out.any():
            log.warning("%d trajectories left the grid at t=%.4f", int(out.sum()), snap.time)
            exited |= out
            X[out] = np.nan
        times.append(snap.time)
        positions.append(X.copy())
        prev, vf_prev = snap, vf_next
    return TrajectorySet(np.array(times), np.array(positions), flags, exited)
