"""One-electron reduced density matrices and linear quantum entropy."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import Grid1D
from .spectral2d import WaveFunction2D


@dataclass
class DensityMatrix1D:
    """rho(x, x') sampled on a grid; Tr rho = sum_m rho[m, m] * dx."""

    grid: Grid1D
    rho: np.ndarray

    def trace(self) -> float:
        return float(np.trace(self.rho).real * self.grid.dx)

    def purity(self) -> float:
        return float(np.sum(np.abs(self.rho) ** 2).real * self.grid.dx**2)

    def hermiticity_error(self) -> float:
        return float(np.max(np.abs(self.rho - self.rho.conj().T)))

    def eigenvalues(self) -> np.ndarray:
        """Occupation numbers (eigenvalues of the integral operator), descending."""
        h = 0.5 * (self.rho + self.rho.conj().T)
        return np.sort(np.linalg.eigvalsh(h * self.grid.dx))[::-1]


def reduced_density_exact(psi: WaveFunction2D, electron: int = 1) -> DensityMatrix1D:
    """rho_i(x, x') = integral Psi Psi* over the other coordinate."""
    a = psi.amplitudes
    if electron == 1:
        grid, other = psi.grid.axis1, psi.grid.axis2
    elif electron == 2:
        a = a.T
        grid, other = psi.grid.axis2, psi.grid.axis1
    else:
        raise ValueError(f"electron must be 1 or 2, got {electron}")
    rho = (a @ a.conj().T) * other.dx
    return DensityMatrix1D(grid, rho)


def reduced_density_tdqmc(ensemble, electron: int = 1) -> DensityMatrix1D:
    """Equal-weight mixture (1/M) sum_k phi_i^k(x) phi_i^k(x')*, renormalised to unit trace."""
    waves = ensemble.waves[electron - 1]
    return density_from_waves(ensemble.grid, waves)


def density_from_waves(grid: Grid1D, waves: np.ndarray) -> DensityMatrix1D:
    M = waves.shape[0]
    rho = (waves.T @ waves.conj()) / M
    rho /= np.trace(rho).real * grid.dx
    return DensityMatrix1D(grid, rho)


def linear_entropy(rho: DensityMatrix1D) -> float:
    """S = 1 - Tr(rho^2)."""
    return 1.0 - rho.purity()


def linear_entropy_of_waves(grid: Grid1D, waves: np.ndarray) -> float:
    """Linear entropy of the equal-weight mixture, via the M x M overlap matrix when M < n."""
    M, n = waves.shape
    if M >= n:
        return linear_entropy(density_from_waves(grid, waves))
    norms = np.sum(np.abs(waves) ** 2, axis=1) * grid.dx
    gram = (waves.conj() @ waves.T) * grid.dx
    return float(1.0 - np.sum(np.abs(gram) ** 2) / norms.sum() ** 2)


@dataclass
class EntropySeries:
    """Entropy curves keyed by method label; negative times are imaginary-time build-up."""

    times: np.ndarray
    values: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        for key, v in self.values.items():
            self.values[key] = np.asarray(v, dtype=float)
            if len(self.values[key]) != len(self.times):
                raise ValueError(f"series {key!r} length does not match the time axis")

    def add(self, label: str, values) -> None:
        values = np.asarray(values, dtype=float)
        if len(values) != len(self.times):
            raise ValueError("length mismatch")
        self.values[label] = values


def entropy_series(states, method: str = "exact", times=None, electron: int = 1, imaginary: bool = False) -> EntropySeries:
    """Linear entropy of each state in a time-ordered sequence.

    ``states`` are WaveFunction2D snapshots (exact) or guide-wave arrays /
    ensembles (tdqmc).  For ``imaginary=True`` the build-up is mapped onto
    negative times ending at 0, the plotting convention used for the
    ground-state preparation.
    """
    states = list(states)
    vals = []
    ts = []
    for s in states:
        if isinstance(s, WaveFunction2D):
            vals.append(linear_entropy(reduced_density_exact(s, electron)))
            ts.append(s.time)
        elif hasattr(s, "waves"):
            vals.append(linear_entropy_of_waves(s.grid, s.waves[electron - 1]))
            ts.append(s.time)
        else:
            grid, waves = s
            vals.append(linear_entropy_of_waves(grid, waves))
            ts.append(np.nan)
    if times is not None:
        ts = list(times)
    ts = np.asarray(ts, dtype=float)
    if imaginary:
        ts = ts - ts[-1]
    return EntropySeries(ts, {f"S_{method}": np.array(vals)})
