"""Time-dependent quantum Monte Carlo with per-walker guide waves.

Each electron i carries M point walkers x_i^k and M guide waves phi_i^k on a
shared 1D grid.  A guide wave feels the confinement, the external dipole field
and an effective interaction obtained by averaging the soft-core potential over
the partner electron's walkers, Gaussian-weighted around the partner walker
with the same index k (kernel width sigma = the nonlocality length).

Imaginary time: walkers follow a drift-diffusion process and the guide waves
relax.  Real time: walkers follow de Broglie-Bohm guidance by their own wave.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .model import (
    ConfigError,
    FieldSpec,
    Grid1D,
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
NOISE_BLOCK = 256


class WalkerNoise:
    """One private Gaussian stream per (electron, walker).

    Draws are buffered in blocks so a step costs one vectorised slice instead
    of N*M generator calls; the sequence seen by each walker depends only on
    (master_seed, its stream id), never on how work is scheduled.
    """

    def __init__(self, master_seed: int, n_electrons: int, n_walkers: int, stream_offset: int = 1000):
        self.master_seed = int(master_seed)
        self.shape = (n_electrons, n_walkers)
        self.stream_offset = stream_offset
        self.streams = [
            [RngStream(master_seed, stream_offset + i * n_walkers + k) for k in range(n_walkers)]
            for i in range(n_electrons)
        ]
        self._buffer = np.empty(self.shape + (NOISE_BLOCK,))
        self._cursor = NOISE_BLOCK

    def _refill(self):
        for i, row in enumerate(self.streams):
            for k, s in enumerate(row):
                self._buffer[i, k] = s.normal(NOISE_BLOCK)
        self._cursor = 0

    def draw(self) -> np.ndarray:
        """Standard normal increments, shape (N, M)."""
        if self._cursor >= NOISE_BLOCK:
            self._refill()
        out = self._buffer[:, :, self._cursor].copy()
        self._cursor += 1
        return out

    def get_state(self) -> dict:
        return {
            "master_seed": self.master_seed,
            "shape": list(self.shape),
            "stream_offset": self.stream_offset,
            "cursor": self._cursor,
            "streams": [[s.state for s in row] for row in self.streams],
        }

    def buffer(self) -> np.ndarray:
        return self._buffer

    @classmethod
    def from_state(cls, state: dict, buffer: np.ndarray) -> "WalkerNoise":
        n, m = state["shape"]
        obj = cls(state["master_seed"], n, m, state["stream_offset"])
        for row, srow in zip(obj.streams, state["streams"]):
            for s, st in zip(row, srow):
                s.state = st
        obj._buffer = np.array(buffer, dtype=float).reshape(n, m, NOISE_BLOCK)
        obj._cursor = int(state["cursor"])
        return obj


@dataclass
class TdqmcEnsemble:
    grid: Grid1D
    waves: np.ndarray  # (N, M, n) complex, each row unit-normalised
    walkers: np.ndarray  # (N, M)
    sigma: np.ndarray  # (N,) nonlocality length of each electron's cloud
    time: float = 0.0
    noise: WalkerNoise | None = None
    exit_flags: np.ndarray = None  # (N, M) counts of boundary events

    def __post_init__(self):
        w = np.asarray(self.waves)
        # imaginary-time ensembles stay real-valued; real-time propagation promotes to complex
        self.waves = w.astype(float) if np.isrealobj(w) else w.astype(complex)
        self.walkers = np.asarray(self.walkers, dtype=float)
        self.sigma = np.asarray(self.sigma, dtype=float).reshape(-1)
        if self.waves.ndim != 3 or self.waves.shape[:2] != self.walkers.shape:
            raise ConfigError("waves must be (N, M, n) and walkers (N, M)")
        if self.waves.shape[2] != self.grid.n_points:
            raise ConfigError("guide waves do not match the grid")
        if self.sigma.shape[0] == 1 and self.n_electrons > 1:
            self.sigma = np.repeat(self.sigma, self.n_electrons)
        if self.sigma.shape[0] != self.n_electrons or np.any(self.sigma <= 0):
            raise ConfigError("need one positive sigma per electron")
        if self.exit_flags is None:
            self.exit_flags = np.zeros(self.walkers.shape, dtype=int)

    @property
    def n_electrons(self) -> int:
        return self.walkers.shape[0]

    @property
    def n_walkers(self) -> int:
        return self.walkers.shape[1]

    def norms(self) -> np.ndarray:
        return np.sum(np.abs(self.waves) ** 2, axis=-1) * self.grid.dx

    def copy(self) -> "TdqmcEnsemble":
        noise = None
        if self.noise is not None:
            noise = WalkerNoise.from_state(self.noise.get_state(), self.noise.buffer().copy())
        return TdqmcEnsemble(
            self.grid, self.waves.copy(), self.walkers.copy(), self.sigma.copy(), self.time, noise, self.exit_flags.copy()
        )

    def permuted(self, perm) -> "TdqmcEnsemble":
        """Same ensemble with walker indices relabelled (same permutation for all electrons)."""
        perm = np.asarray(perm)
        return TdqmcEnsemble(
            self.grid, self.waves[:, perm].copy(), self.walkers[:, perm].copy(), self.sigma.copy(), self.time
        )


@dataclass(frozen=True)
class ImaginaryStepParams:
    dtau: float = 0.01
    diffusion: float = 0.5
    include_drift: bool = True
    include_noise: bool = True

    def __post_init__(self):
        if not self.dtau > 0:
            raise ConfigError("dtau must be positive")
        if not self.diffusion > 0:
            raise ConfigError("diffusion coefficient must be positive")

    @property
    def noise_std(self) -> float:
        return float(np.sqrt(2 * self.diffusion * self.dtau))


@dataclass
class EnergyEstimate:
    E1: float
    E2: float
    stderr1: float
    stderr2: float

    @property
    def relative_gap(self) -> float:
        return abs(self.E1 - self.E2) / abs(self.E2)


def normalize_waves(waves: np.ndarray, dx: float) -> np.ndarray:
    nrm = np.sqrt(np.sum(np.abs(waves) ** 2, axis=-1, keepdims=True) * dx)
    if not np.all(np.isfinite(nrm)) or np.any(nrm == 0):
        raise NumericalError("guide wave norm is zero or non-finite")
    return waves / nrm


def gaussian_wave(grid: Grid1D, width: float, center: float = 0.0) -> np.ndarray:
    phi = np.exp(-((grid.x - center) ** 2) / (2 * width**2))
    return phi / np.sqrt(np.sum(phi**2) * grid.dx)


def harmonic_wave(grid: Grid1D, spec: SystemSpec) -> np.ndarray:
    """Ground state of -1/2 d^2/dx^2 + c x^2 (energy sqrt(2c)/2)."""
    return gaussian_wave(grid, 1.0 / np.sqrt(np.sqrt(2 * spec.confinement_strength)))


def init_ensemble(
    M: int,
    width: float,
    grid: Grid1D,
    sigma,
    seed: int = 42,
    n_electrons: int = 2,
) -> TdqmcEnsemble:
    """Gaussian guide waves of the given width, walkers drawn from |phi|^2.

    Initial positions use one stream per walker (stream id = i*M + k) so the
    walker set is independent of any later parallel decomposition.
    """
    if not isinstance(M, (int, np.integer)) or M < 1:
        raise ConfigError(f"M must be a positive integer, got {M!r}")
    if not width > 0:
        raise ConfigError("width must be positive")
    phi = gaussian_wave(grid, width)
    waves = np.broadcast_to(phi, (n_electrons, M, grid.n_points)).copy()
    std = width / np.sqrt(2)
    walkers = np.empty((n_electrons, M))
    for i in range(n_electrons):
        for k in range(M):
            walkers[i, k] = RngStream(seed, i * M + k).normal(scale=std)
    walkers = np.clip(walkers, grid.x_min, grid.x_max)
    sig = np.broadcast_to(np.asarray(sigma, dtype=float), (n_electrons,)).copy()
    return TdqmcEnsemble(grid, waves, walkers, sig, 0.0, WalkerNoise(seed, n_electrons, M))


def kernel_weight(x, x_ref, sigma):
    """exp(-|x - x_ref|^2 / (2 sigma^2)), the nonlocality kernel."""
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma <= 0):
        raise ConfigError("sigma must be positive")
    d = np.subtract(x, x_ref)
    return np.exp(-(d * d) / (2 * sigma**2))


def kernel_matrix(positions: np.ndarray, sigma: float) -> np.ndarray:
    """Row-normalised weights W[k, l] = K(x^l, x^k) / Z^k with Z^k = sum_l K(x^l, x^k)."""
    if not sigma > 0:
        raise ConfigError("sigma must be positive")
    w = np.subtract.outer(positions, positions)
    np.square(w, out=w)
    w *= -0.5 / sigma**2
    np.exp(w, out=w)
    w /= w.sum(axis=1, keepdims=True)
    return w


def pair_potential_table(grid: Grid1D, positions: np.ndarray, spec: SystemSpec) -> np.ndarray:
    """V_ee(x_m, positions[l]) as an (M, n) table."""
    t = np.subtract.outer(positions, grid.x)
    np.square(t, out=t)
    t += spec.softcore_a
    np.sqrt(t, out=t)
    np.reciprocal(t, out=t)
    return t


def effective_potentials(ens: TdqmcEnsemble, spec: SystemSpec) -> np.ndarray:
    """V_eff[i, k, :] on the grid for every electron and walker (shape (N, M, n)).

    All entries use the same walker snapshot, so the update is synchronous.
    """
    N, M = ens.walkers.shape
    out = np.zeros((N, M, ens.grid.n_points))
    if not spec.interaction_on or N < 2:
        return out
    for j in range(N):
        xj = ens.walkers[j]
        conv = kernel_matrix(xj, ens.sigma[j]) @ pair_potential_table(ens.grid, xj, spec)
        for i in range(N):
            if i != j:
                out[i] += conv
    return out


def effective_potential(ens: TdqmcEnsemble, spec: SystemSpec, i: int, k: int) -> np.ndarray:
    """V_eff for electron ``i`` (1-based) and walker ``k`` (0-based) on the grid."""
    x = ens.grid.x
    out = np.zeros(ens.grid.n_points)
    if not spec.interaction_on:
        return out
    for j in range(ens.n_electrons):
        if j == i - 1:
            continue
        xj = ens.walkers[j]
        w = kernel_weight(xj, xj[k], ens.sigma[j])
        out += (w / w.sum()) @ soft_core_potential(x[None, :], xj[:, None], spec)
    return out


class FourierSampler:
    """Exact trigonometric interpolation of guide waves and derivatives at walker positions.

    Real-valued waves use the one-sided (rfft) expansion, complex waves the
    full one; the Nyquist mode is dropped from odd derivatives.
    """

    def __init__(self, grid: Grid1D):
        self.grid = grid
        n = grid.n_points
        self.dk = 2 * np.pi / grid.span
        # complex expansion ordered m = -n/2 .. n/2-1
        self.order = np.fft.fftshift(np.arange(n))
        self.k = np.fft.fftshift(grid.k)
        self.kd = self.k.copy()
        self.kd[0] = 0.0
        # real expansion m = 0 .. n/2
        self.kr = np.arange(n // 2 + 1) * self.dk
        self.kdr = self.kr.copy()
        self.kdr[-1] = 0.0
        self.rweight = np.full(n // 2 + 1, 2.0)
        self.rweight[0] = self.rweight[-1] = 1.0

    def coefficients(self, waves: np.ndarray) -> np.ndarray:
        n = self.grid.n_points
        if np.isrealobj(waves):
            return np.fft.rfft(waves, axis=-1) * (self.rweight / n)
        return np.fft.fft(waves, axis=-1)[..., self.order] / n

    def evaluate(self, waves: np.ndarray, pos: np.ndarray, derivs=(0, 1), coef: np.ndarray | None = None) -> list[np.ndarray]:
        """waves (M, n), pos (M,) -> list of arrays (M,) for each requested derivative order."""
        real = np.isrealobj(waves)
        if coef is None:
            coef = self.coefficients(waves)
        u = np.asarray(pos, dtype=float) - self.grid.x_min
        if real:
            k, kd = self.kr, self.kdr
        else:
            k, kd = self.k, self.kd
        powers = np.empty((len(u), len(k)), dtype=complex)
        powers[:, 0] = np.exp(1j * k[0] * u)
        powers[:, 1:] = np.exp(1j * self.dk * u)[:, None]
        np.cumprod(powers, axis=1, out=powers)
        cp = coef * powers
        out = []
        for d in derivs:
            if d == 0:
                v = cp.sum(axis=1)
            elif d == 1:
                v = cp @ (1j * kd)
            elif d == 2:
                v = cp @ (-(k**2) + 0j)
            else:
                raise ValueError(d)
            out.append(v.real if real else v)
        return out


class TdqmcPropagator:
    """Split-step propagation of all guide waves plus walker updates.

    ``workers`` splits the guide-wave FFTs over threads by walker chunks; each
    chunk's arithmetic is identical to the serial path, so results do not
    depend on the worker count.
    """

    def __init__(self, grid: Grid1D, spec: SystemSpec, fields: FieldSpec | None, dt: float, mode: str, workers: int = 1):
        if mode not in (REAL, IMAGINARY):
            raise ConfigError(f"unknown mode {mode!r}")
        if not dt > 0:
            raise ConfigError("time step must be positive")
        self.grid, self.spec, self.dt, self.mode = grid, spec, dt, mode
        self.fields = fields if fields is not None else FieldSpec.off(2)
        self.workers = max(1, int(workers))
        self._c = -1j if mode == REAL else -1.0
        self.kin_factor = np.exp(self._c * dt * 0.5 * grid.k**2)
        kr = np.arange(grid.n_points // 2 + 1) * (2 * np.pi / grid.span)
        self.kin_factor_r = np.exp(-dt * 0.5 * kr**2) if mode == IMAGINARY else None
        self.v_en = confinement_potential(grid.x, spec)
        self.sampler = FourierSampler(grid)

    def _chunks(self, M: int):
        n = min(self.workers, M)
        bounds = np.linspace(0, M, n + 1).astype(int)
        return [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]

    def _map(self, fn, M: int):
        chunks = self._chunks(M)
        if len(chunks) == 1:
            fn(chunks[0])
            return
        with ThreadPoolExecutor(len(chunks)) as pool:
            list(pool.map(fn, chunks))

    def advance_waves(self, ens: TdqmcEnsemble, v_eff: np.ndarray | None, t: float) -> None:
        """One Strang step of every guide wave; the dipole field is taken at t + dt/2."""
        t_mid = t + 0.5 * self.dt
        half_dt = 0.5 * self.dt
        dx = self.grid.dx
        real = self.mode == IMAGINARY and np.isrealobj(ens.waves)
        if not real and np.isrealobj(ens.waves):
            ens.waves = ens.waves.astype(complex)
        n = self.grid.n_points
        for i in range(ens.n_electrons):
            e_i = float(self.fields[i + 1](t_mid)) if i < len(self.fields.fields) else 0.0
            v = self.v_en - e_i * self.grid.x
            if v_eff is None:
                half = np.broadcast_to(np.exp(self._c * half_dt * v), ens.waves[i].shape)
            else:
                half = np.exp(self._c * half_dt * (v[None, :] + v_eff[i]))
            if real:
                half = half.real
            waves = ens.waves[i]

            def work(sl, waves=waves, half=half):
                h = half[sl]
                if real:
                    out = h * np.fft.irfft(self.kin_factor_r * np.fft.rfft(h * waves[sl], axis=-1), n, axis=-1)
                else:
                    out = h * np.fft.ifft(self.kin_factor * np.fft.fft(h * waves[sl], axis=-1), axis=-1)
                if self.mode == IMAGINARY:
                    out = normalize_waves(out, dx)
                waves[sl] = out

            self._map(work, ens.n_walkers)
        if not np.all(np.isfinite(ens.waves)):
            raise NumericalError(f"non-finite guide wave after step at t={t:.6g}")

    def log_gradient(self, waves: np.ndarray, pos: np.ndarray, previous=None, coef=None) -> tuple[np.ndarray, np.ndarray]:
        """grad(phi)/phi at each walker with the node guard applied; returns (ratio, node flags)."""
        phi, dphi = self.sampler.evaluate(waves, pos, (0, 1), coef)
        peak = np.max(np.abs(waves) ** 2, axis=-1)
        near = np.abs(phi) ** 2 < NODE_GUARD * peak
        ratio = dphi / np.where(near, 1.0, phi)
        if near.any():
            ratio[near] = 0.0 if previous is None else previous[near]
        return ratio, near


def guide_wave_step(
    ens: TdqmcEnsemble,
    spec: SystemSpec,
    dt: float,
    mode: str = IMAGINARY,
    fields: FieldSpec | None = None,
    v_eff: np.ndarray | None = None,
) -> TdqmcEnsemble:
    """Advance every guide wave by one split step (walkers untouched)."""
    prop = TdqmcPropagator(ens.grid, spec, fields, dt, mode)
    if v_eff is None and spec.interaction_on:
        v_eff = effective_potentials(ens, spec)
    prop.advance_waves(ens, v_eff, ens.time)
    if mode == REAL:
        ens.time += dt
    return ens


def _reflect(x: np.ndarray, lo: float, hi: float) -> tuple[np.ndarray, np.ndarray]:
    hit = (x < lo) | (x > hi)
    x = np.where(x < lo, 2 * lo - x, x)
    x = np.where(x > hi, 2 * hi - x, x)
    return np.clip(x, lo, hi), hit


def walker_drift_diffusion_step(
    ens: TdqmcEnsemble,
    params: ImaginaryStepParams,
    prop: TdqmcPropagator | None = None,
) -> TdqmcEnsemble:
    """dx = Re[grad phi/phi] dtau + sqrt(2 D dtau) * eta, reflecting at the grid edges."""
    if prop is None:
        prop = TdqmcPropagator(ens.grid, SystemSpec(), None, params.dtau, IMAGINARY)
    if params.include_noise:
        if ens.noise is None:
            raise ConfigError("ensemble carries no noise streams")
        eta = ens.noise.draw()
    move = np.zeros_like(ens.walkers)
    for i in range(ens.n_electrons):
        if params.include_drift:
            ratio, _ = prop.log_gradient(ens.waves[i], ens.walkers[i])
            move[i] += ratio.real * params.dtau
        if params.include_noise:
            move[i] += params.noise_std * eta[i]
    new, hit = _reflect(ens.walkers + move, ens.grid.x_min, ens.grid.x_max)
    ens.walkers = new
    ens.exit_flags += hit
    return ens


def energy_components(ens: TdqmcEnsemble, spec: SystemSpec) -> tuple[np.ndarray, np.ndarray]:
    """Per-walker local (mixed) energies and per-walker wave-only energies, each shape (M,)."""
    grid = ens.grid
    dx = grid.dx
    sampler = FourierSampler(grid)
    N, M = ens.walkers.shape
    e_mixed = np.zeros(M)
    e_wave = np.zeros(M)
    v_en = confinement_potential(grid.x, spec)
    k2 = grid.k**2
    for i in range(N):
        w = ens.waves[i]
        xi = ens.walkers[i]
        phi, lap = sampler.evaluate(w, xi, (0, 2))
        peak = np.max(np.abs(w) ** 2, axis=-1)
        near = np.abs(phi) ** 2 < NODE_GUARD * peak
        local_kin = np.where(near, 0.0, (-0.5 * lap / np.where(near, 1.0, phi)).real)
        e_mixed += local_kin + confinement_potential(xi, spec)
        f = np.fft.fft(w, axis=-1)
        kin = 0.5 * np.sum(k2 * np.abs(f) ** 2, axis=-1) * dx / grid.n_points
        pot = np.sum(v_en * np.abs(w) ** 2, axis=-1) * dx
        e_wave += kin + pot
    if spec.interaction_on:
        for i in range(N):
            for j in range(i):
                e_mixed += soft_core_potential(ens.walkers[i], ens.walkers[j], spec)
                vij = soft_core_potential(ens.walkers[i][:, None], grid.x[None, :], spec)
                e_wave += np.sum(vij * np.abs(ens.waves[j]) ** 2, axis=-1) * dx
    return e_mixed, e_wave


def energy_mixed(ens: TdqmcEnsemble, spec: SystemSpec) -> float:
    return float(np.mean(energy_components(ens, spec)[0]))


def energy_wave(ens: TdqmcEnsemble, spec: SystemSpec) -> float:
    return float(np.mean(energy_components(ens, spec)[1]))


def energy_estimate(ens: TdqmcEnsemble, spec: SystemSpec) -> EnergyEstimate:
    e1, e2 = energy_components(ens, spec)
    M = len(e1)
    return EnergyEstimate(
        float(e1.mean()),
        float(e2.mean()),
        float(e1.std() / np.sqrt(M)),
        float(e2.std() / np.sqrt(M)),
    )


@dataclass
class GroundStateResult:
    ensemble: TdqmcEnsemble
    energy: EnergyEstimate
    stage1_energy: EnergyEstimate
    history: list = field(default_factory=list)  # rows (tau, stage, E1, E2, stderr2, S)
    converged: bool = True
    stage2_steps: int = 0


def ensemble_entropy(ens: TdqmcEnsemble, electron: int = 1) -> float:
    from .entanglement import linear_entropy_of_waves

    return linear_entropy_of_waves(ens.grid, ens.waves[electron - 1])


def run_stage1(
    ens: TdqmcEnsemble,
    spec: SystemSpec,
    n_steps: int,
    params: ImaginaryStepParams = ImaginaryStepParams(),
    prop: TdqmcPropagator | None = None,
    callback=None,
) -> TdqmcEnsemble:
    """Alternate guide-wave relaxation and walker drift-diffusion for ``n_steps`` steps.

    Effective potentials come from the walker positions at the start of each
    step.  ``callback(n)`` is invoked after every step.
    """
    if prop is None:
        prop = TdqmcPropagator(ens.grid, spec, None, params.dtau, IMAGINARY)
    for n in range(1, n_steps + 1):
        v_eff = effective_potentials(ens, spec) if spec.interaction_on else None
        prop.advance_waves(ens, v_eff, 0.0)
        walker_drift_diffusion_step(ens, params, prop)
        if callback is not None:
            callback(n)
    return ens


def run_stage2(
    ens: TdqmcEnsemble,
    spec: SystemSpec,
    tol: float,
    params: ImaginaryStepParams = ImaginaryStepParams(),
    max_steps: int = 4000,
    check_stride: int = 20,
    prop: TdqmcPropagator | None = None,
    callback=None,
) -> tuple[int, bool]:
    """Relax guide waves with walkers frozen until E2 moves less than ``tol`` per ``check_stride`` steps."""
    if prop is None:
        prop = TdqmcPropagator(ens.grid, spec, None, params.dtau, IMAGINARY)
    v_eff = effective_potentials(ens, spec) if spec.interaction_on else None
    e_prev = energy_wave(ens, spec)
    n = 0
    while n < max_steps:
        prop.advance_waves(ens, v_eff, 0.0)
        n += 1
        if callback is not None:
            callback(n)
        if n % check_stride == 0:
            e = energy_wave(ens, spec)
            if abs(e - e_prev) < tol:
                return n, True
            e_prev = e
    log.warning("stage 2 did not reach tolerance %.1e in %d steps", tol, max_steps)
    return n, False


def prepare_ground_state(
    ens: TdqmcEnsemble,
    spec: SystemSpec,
    stage1_steps: int = 1000,
    stage2_tol: float = 1e-7,
    params: ImaginaryStepParams = ImaginaryStepParams(),
    stage2_max_steps: int = 4000,
    check_stride: int = 20,
    record_stride: int = 0,
    workers: int = 1,
) -> GroundStateResult:
    """Two-stage imaginary-time preparation.

    Stage 1 moves walkers by drift-diffusion while the guide waves relax;
    stage 2 freezes the walkers and keeps relaxing the guide waves until the
    wave-only energy is stationary.  With ``record_stride`` > 0 the energies
    and the electron-1 linear entropy are logged along the way.
    """
    prop = TdqmcPropagator(ens.grid, spec, None, params.dtau, IMAGINARY, workers)
    history = []
    offset = [0]

    def record(stage, n):
        if record_stride and n % record_stride == 0:
            est = energy_estimate(ens, spec)
            tau = (offset[0] + n) * params.dtau
            history.append((tau, stage, est.E1, est.E2, est.stderr2, ensemble_entropy(ens)))

    record(1, 0)
    run_stage1(ens, spec, stage1_steps, params, prop, lambda n: record(1, n))
    stage1 = energy_estimate(ens, spec)
    log.info("stage 1 done: E1=%.5f E2=%.5f +- %.5f", stage1.E1, stage1.E2, stage1.stderr2)
    offset[0] = stage1_steps
    n2, converged = run_stage2(ens, spec, stage2_tol, params, stage2_max_steps, check_stride, prop, lambda n: record(2, n))
    est = energy_estimate(ens, spec)
    return GroundStateResult(ens, est, stage1, history, converged, n2)


def real_time_step(
    ens: TdqmcEnsemble,
    spec: SystemSpec,
    fields: FieldSpec,
    dt: float,
    prop: TdqmcPropagator | None = None,
) -> TdqmcEnsemble:
    """Advance guide waves by dt and move each walker with Im[grad phi/phi] (RK2).

    The half-step velocity averages the old and new guide waves at the
    midpoint.  Walkers that would leave the grid are clamped and flagged.
    """
    if prop is None:
        prop = TdqmcPropagator(ens.grid, spec, fields, dt, REAL)
    if np.isrealobj(ens.waves):
        ens.waves = ens.waves.astype(complex)
    old = ens.waves.copy()
    v_eff = effective_potentials(ens, spec) if spec.interaction_on else None
    prop.advance_waves(ens, v_eff, ens.time)
    new_pos = np.empty_like(ens.walkers)
    sampler = prop.sampler
    for i in range(ens.n_electrons):
        x0 = ens.walkers[i]
        c_old = sampler.coefficients(old[i])
        c_new = sampler.coefficients(ens.waves[i])
        v0 = prop.log_gradient(old[i], x0, coef=c_old)[0].imag
        mid = x0 + 0.5 * dt * v0
        va = prop.log_gradient(old[i], mid, v0 + 0j, c_old)[0].imag
        vb = prop.log_gradient(ens.waves[i], mid, v0 + 0j, c_new)[0].imag
        new_pos[i] = x0 + dt * 0.5 * (va + vb)
    lo, hi = ens.grid.x_min, ens.grid.x_max
    hit = (new_pos < lo) | (new_pos > hi)
    if hit.any():
        log.warning("%d walkers hit the grid edge at t=%.4f", int(hit.sum()), ens.time)
    ens.walkers = np.clip(new_pos, lo, hi)
    ens.exit_flags += hit
    ens.time += dt
    return ens


def walker_velocities(ens: TdqmcEnsemble) -> np.ndarray:
    """Im[grad phi/phi] for every walker, shape (N, M)."""
    sampler = TdqmcPropagator(ens.grid, SystemSpec(), None, 1.0, REAL)
    return np.stack([sampler.log_gradient(ens.waves[i], ens.walkers[i])[0].imag for i in range(ens.n_electrons)])


def tdqmc_dipole(ens: TdqmcEnsemble) -> np.ndarray:
    """Mean walker position per electron."""
    return ens.walkers.mean(axis=1)


def wave_dipole(ens: TdqmcEnsemble) -> np.ndarray:
    """Per-electron average over k of <phi_i^k| x |phi_i^k>."""
    dens = np.abs(ens.waves) ** 2 * ens.grid.dx
    return (dens @ ens.grid.x).mean(axis=1)


@dataclass
class TdqmcRealTimeRun:
    times: np.ndarray
    walker_dipoles: np.ndarray  # (n_times, N)
    wave_dipoles: np.ndarray  # (n_times, N)
    walker_stderr: np.ndarray  # (n_times, N)
    trajectories: np.ndarray  # (n_times, N, M)
    entropy: np.ndarray  # (n_times,) electron-1 linear entropy, NaN when not recorded
    snapshots: list  # ensembles copied at each record point when requested
    final: TdqmcEnsemble


def propagate_real(
    ens: TdqmcEnsemble,
    spec: SystemSpec,
    fields: FieldSpec,
    dt: float,
    n_steps: int,
    record_stride: int = 10,
    keep_snapshots: bool = False,
    workers: int = 1,
    record_entropy: bool = False,
) -> TdqmcRealTimeRun:
    """Real-time run; sigma stays at its ground-state value throughout."""
    prop = TdqmcPropagator(ens.grid, spec, fields, dt, REAL, workers)
    times, wd, vd, se, traj, ent, snaps = [], [], [], [], [], [], []

    def record():
        times.append(ens.time)
        wd.append(tdqmc_dipole(ens))
        vd.append(wave_dipole(ens))
        se.append(ens.walkers.std(axis=1) / np.sqrt(ens.n_walkers))
        traj.append(ens.walkers.copy())
        ent.append(ensemble_entropy(ens) if record_entropy else np.nan)
        if keep_snapshots:
            snaps.append(ens.copy())

    record()
    for n in range(1, n_steps + 1):
        real_time_step(ens, spec, fields, dt, prop)
        if n % record_stride == 0 or n == n_steps:
            record()
    return TdqmcRealTimeRun(
        np.array(times), np.array(wd), np.array(vd), np.array(se), np.array(traj), np.array(ent), snaps, ens
    )
