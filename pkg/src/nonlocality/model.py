"""Shared domain types: grids, system parameters, driving fields and RNG streams.

Everything is in atomic units (hbar = m_e = e = 1).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ConfigError(ValueError):
    """Invalid physical or numerical parameter."""


class NumericalError(RuntimeError):
    """A solver produced a non-finite or otherwise unusable state."""


@dataclass(frozen=True)
class Grid1D:
    """Uniform periodic grid centred at the origin.

    Points are ``x_m = -span/2 + m*dx`` for ``m = 0..n_points-1`` with
    ``dx = span/n_points``.
    """

    n_points: int = 256
    span: float = 20.0

    def __post_init__(self):
        n = self.n_points
        if not isinstance(n, (int, np.integer)) or n < 8 or n & (n - 1):
            raise ConfigError(f"n_points must be a power of two >= 8, got {n!r}")
        if not self.span > 0:
            raise ConfigError(f"span must be positive, got {self.span!r}")

    @property
    def dx(self) -> float:
        return self.span / self.n_points

    @property
    def x(self) -> np.ndarray:
        return -self.span / 2 + np.arange(self.n_points) * self.dx

    @property
    def k(self) -> np.ndarray:
        """Angular wavenumbers in FFT order."""
        return 2 * np.pi * np.fft.fftfreq(self.n_points, self.dx)

    @property
    def x_min(self) -> float:
        return -self.span / 2

    @property
    def x_max(self) -> float:
        """Last grid point (the box is periodic, so span/2 itself is not a node)."""
        return self.span / 2 - self.dx

    def contains(self, pos) -> np.ndarray:
        pos = np.asarray(pos)
        return (pos >= self.x_min) & (pos <= self.x_max)


@dataclass(frozen=True)
class Grid2D:
    axis1: Grid1D = field(default_factory=Grid1D)
    axis2: Grid1D = field(default_factory=Grid1D)

    @classmethod
    def square(cls, n_points: int = 256, span: float = 20.0) -> "Grid2D":
        g = Grid1D(n_points, span)
        return cls(g, g)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.axis1.n_points, self.axis2.n_points)

    @property
    def size(self) -> int:
        return self.axis1.n_points * self.axis2.n_points

    @property
    def cell(self) -> float:
        """Area element dx1*dx2."""
        return self.axis1.dx * self.axis2.dx

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        return np.meshgrid(self.axis1.x, self.axis2.x, indexing="ij")


@dataclass(frozen=True)
class SystemSpec:
    """Two-body Hamiltonian parameters.

    ``confinement_strength`` is the coefficient c in V_en = c*x**2 and
    ``softcore_a`` the regulariser in V_ee = 1/sqrt(a + (x1-x2)**2).
    """

    n_electrons: int = 2
    confinement_strength: float = 0.5
    softcore_a: float = 1.0
    interaction_on: bool = True

    def __post_init__(self):
        if self.n_electrons < 1:
            raise ConfigError("n_electrons must be >= 1")
        if not self.confinement_strength > 0:
            raise ConfigError("confinement_strength must be positive")
        if not self.softcore_a > 0:
            raise ConfigError("softcore_a must be positive")

    def with_interaction(self, on: bool) -> "SystemSpec":
        return SystemSpec(self.n_electrons, self.confinement_strength, self.softcore_a, on)


@dataclass(frozen=True)
class ElectronField:
    """E(t) = amplitude * sin(omega*t + phase) for t >= t_on, zero before."""

    amplitude: float = 0.0
    omega: float = 5.0
    phase: float = 0.0
    t_on: float = 0.0

    def __post_init__(self):
        if self.omega < 0:
            raise ConfigError("omega must be >= 0")

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        val = self.amplitude * np.sin(self.omega * t + self.phase)
        return np.where(t >= self.t_on, val, 0.0)


@dataclass(frozen=True)
class FieldSpec:
    """Per-electron driving fields, indexed from 1 like the electrons."""

    fields: tuple[ElectronField, ...] = (ElectronField(), ElectronField())

    @classmethod
    def off(cls, n_electrons: int = 2) -> "FieldSpec":
        return cls(tuple(ElectronField() for _ in range(n_electrons)))

    @classmethod
    def driven(cls, amplitudes, omega: float = 5.0, phase: float = 0.0, t_on: float = 0.0) -> "FieldSpec":
        return cls(tuple(ElectronField(float(a), omega, phase, t_on) for a in amplitudes))

    def __getitem__(self, i: int) -> ElectronField:
        return self.fields[i - 1]

    @property
    def is_off(self) -> bool:
        return all(f.amplitude == 0.0 for f in self.fields)


def confinement_potential(x, spec: SystemSpec):
    return spec.confinement_strength * np.square(x)


def soft_core_potential(x1, x2, spec: SystemSpec):
    d = np.subtract(x1, x2)
    if not spec.interaction_on:
        return np.zeros_like(d, dtype=float)
    return 1.0 / np.sqrt(spec.softcore_a + d * d)


def field_value(t, i: int, f: FieldSpec):
    return f[i](t)


def dipole_potential(x, t, i: int, f: FieldSpec):
    return -field_value(t, i, f) * np.asarray(x)


class RngStream:
    """Independent, reproducible random stream keyed by (master_seed, stream_id).

    Built on numpy's SeedSequence spawn keys, so distinct ids give
    statistically independent PCG64 streams.
    """

    def __init__(self, master_seed: int, stream_id: int = 0):
        self.master_seed = int(master_seed)
        self.stream_id = int(stream_id)
        ss = np.random.SeedSequence(entropy=self.master_seed, spawn_key=(self.stream_id,))
        self.generator = np.random.Generator(np.random.PCG64(ss))

    def normal(self, size=None, scale: float = 1.0):
        return self.generator.normal(0.0, scale, size)

    def uniform(self, size=None):
        return self.generator.random(size)

    @property
    def state(self) -> dict:
        return self.generator.bit_generator.state

    @state.setter
    def state(self, value: dict) -> None:
        self.generator.bit_generator.state = value

    def __repr__(self):
        return f"RngStream(master_seed={self.master_seed}, stream_id={self.stream_id})"
