"""End-to-end acceptance criteria, run with the default configuration.

Each test records a one-line PASS/FAIL verdict with the measured numbers;
the lines are printed in the terminal summary (see conftest.py).  Expect
roughly half an hour on one core: the sigma sweep dominates.
"""

import time

import numpy as np
import pytest
from scipy import stats

from nonlocality import spectral2d as S
from nonlocality import tdqmc as T
from nonlocality.entanglement import reduced_density_exact
from nonlocality.model import FieldSpec, Grid2D, SystemSpec
from nonlocality.runner.config import parse_config
from nonlocality.runner.scenarios import exact_ground_state, run_scenario, tdqmc_ground_state

pytestmark = pytest.mark.acceptance

VERDICTS: list[str] = []


def verdict(n: int, ok: bool, text: str) -> None:
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {text}"
    VERDICTS.append(line)
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def cfg(tmp_path_factory):
    return parse_config(None, {"out": str(tmp_path_factory.mktemp("acceptance"))}, env={})


def _timed(fn):
    t0 = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - t0


@pytest.fixture(scope="module")
def fig1bc(cfg):
    return _timed(lambda: run_scenario("fig1bc", cfg))


@pytest.fixture(scope="module")
def fig1a(cfg):
    return _timed(lambda: run_scenario("fig1a", cfg))


@pytest.fixture(scope="module")
def fig2(cfg):
    return _timed(lambda: run_scenario("fig2", cfg))


@pytest.fixture(scope="module")
def fig3(cfg):
    return _timed(lambda: run_scenario("fig3", cfg))


def test_c01_exact_ground_state(fig1bc):
    report, dt = fig1bc
    e = report.headline["exact_energy"]
    verdict(1, abs(e - 1.7735) <= 2e-3, f"E = {e:.5f} (target 1.7735 +- 2e-3), {dt:.0f} s incl. driven snapshot")


def test_c02_noninteracting_ground_state(cfg):
    res, dt = _timed(lambda: exact_ground_state(cfg, interaction_on=False))
    verdict(2, abs(res.energy - 1.0) <= 1e-4, f"E = {res.energy:.7f} (target 1.0000 +- 1e-4), {dt:.0f} s")


def _dense_hamiltonian(grid: Grid2D, spec: SystemSpec) -> np.ndarray:
    """Discretised two-body Hamiltonian with the same spectral kinetic operator as the propagator."""
    g = grid.axis1
    n = g.n_points
    kin1 = np.fft.ifft(0.5 * g.k[:, None] ** 2 * np.fft.fft(np.eye(n), axis=0), axis=0).real
    eye = np.eye(n)
    H = np.kron(kin1, eye) + np.kron(eye, kin1)
    H[np.diag_indices_from(H)] += S.static_potential(grid, spec).ravel()
    return H


def test_c03_small_grid_oracle():
    t0 = time.perf_counter()
    grid = Grid2D.square(32, 20.0)
    spec = SystemSpec()
    res = S.relax_ground_state(S.init_gaussian(grid, 1.0), spec, dtau=0.001, energy_tol=1e-13)
    w, v = np.linalg.eigh(_dense_hamiltonian(grid, spec))
    ground = v[:, 0].reshape(grid.shape) / np.sqrt(grid.cell)
    overlap = np.vdot(ground, res.psi.amplitudes)
    ground = ground * overlap / abs(overlap)
    oracle = S.WaveFunction2D(grid, ground.astype(complex))
    rho_a = reduced_density_exact(res.psi, 1).rho
    rho_b = reduced_density_exact(oracle, 1).rho
    de = abs(res.energy - w[0])
    drho = float(np.max(np.abs(rho_a - rho_b)))
    ok = de < 1e-4 and drho < 1e-6
    verdict(3, ok, f"|dE| = {de:.2e} (< 1e-4), max|d rho| = {drho:.2e} (< 1e-6), {time.perf_counter() - t0:.0f} s")


def test_c04_variational_minimum(fig1a):
    report, dt = fig1a
    h = report.headline
    s, e = h["sigma_star"], h["E_star"]
    ok = abs(s - 0.82) <= 0.08 and abs(e - 1.7736) <= 5e-3
    verdict(
        4,
        ok,
        f"sigma* = {s:.3f} (0.82 +- 0.08), E* = {e:.5f} (1.7736 +- 5e-3), "
        f"raw min at sigma = {h['raw_min_sigma']:.2f}, {dt / 60:.1f} min",
    )


def test_c05_estimator_agreement(cfg):
    res = tdqmc_ground_state(cfg)
    gap = res.energy.relative_gap
    verdict(
        5,
        gap < 0.02 and res.converged,
        f"E1 = {res.energy.E1:.5f}, E2 = {res.energy.E2:.5f}, |E1-E2|/E2 = {gap:.2e} (< 2e-2)",
    )


def test_c06_ehrenfest_dipole(fig2):
    report, dt = fig2
    h = report.headline
    ex = h["exact_driven_dipole_oracle_error"]
    tq = h["tdqmc_driven_dipole_oracle_error"]
    tol = 0.05 + 3 * h["tdqmc_driven_dipole_stderr"]
    verdict(6, ex < 0.05 and tq < tol, f"exact max err {ex:.2e} (< 0.05), TDQMC max err {tq:.2e} (< {tol:.3f})")


def test_c07_nonlocal_causality(fig2):
    h = fig2[0].headline
    d2 = h["exact_idler_dipole_max"]
    dev = h["exact_idler_traj_max_deviation"]
    ok = d2 < 1e-3 and dev > 10 * 1e-3
    verdict(7, ok, f"max|<x2>| = {d2:.2e} (< 1e-3), max idler trajectory excursion = {dev:.3f} (> 1e-2)")


def test_c08_spatial_nonlocality_dominance(fig3):
    report, dt = fig3
    h = report.headline
    r = h["idler_ratio"]
    verdict(
        8,
        r >= 30,
        f"idler ratio = {r:.1f} (>= 30): interacting max|d2| = {h['exact_idler_dipole_max']:.3e}, "
        f"non-interacting idler excursion = {h['nonint_idler_traj_max_subtracted']:.2e}, {dt / 60:.1f} min",
    )


def test_c09_tdqmc_decoupling(fig2):
    h = fig2[0].headline
    vals = [h["tdqmc_idler_wave_max_change"], h["tdqmc_idler_max_velocity_change"], h["tdqmc_idler_max_motion"]]
    verdict(9, all(v == 0.0 for v in vals), f"idler wave/velocity/position differences driven vs undriven = {vals}")


def test_c10_entropy(fig2, fig3):
    h2, h3 = fig2[0].headline, fig3[0].headline
    dev = h2["entropy_max_relative_deviation"]
    s0 = h3["entropy_tdqmc_plateau_0.82"]
    d07 = abs(h3["entropy_tdqmc_plateau_0.7"] - s0) / s0
    d10 = abs(h3["entropy_tdqmc_plateau_1"] - s0) / s0
    ok = dev < 0.15 and d07 > 0.05 and d10 > 0.05
    verdict(
        10,
        ok,
        f"TDQMC vs exact max rel dev {dev:.3f} (< 0.15; S_exact = {h2['entropy_exact_plateau']:.5f}, "
        f"S_tdqmc = {h2['entropy_tdqmc_plateau']:.5f}); sensitivity 0.70: {d07:.2f}, 1.0: {d10:.2f} (> 0.05)",
    )


def test_c11_invariants():
    t0 = time.perf_counter()
    problems = []
    spec, off = SystemSpec(), SystemSpec(interaction_on=False)

    # norm conservation over 10^3 real-time steps, exact solver and guide waves
    grid = Grid2D.square(128, 20.0)
    psi = S.init_gaussian(grid, 1.0)
    run = S.propagate_real(psi, spec, FieldSpec.driven([15.0, 0.0]), S.PropagationSchedule(0.001, 1000, 1000), False)
    norm_err = abs(run.final.norm() - 1)
    ens = T.init_ensemble(50, 1.0, grid.axis1, 0.82, seed=1)
    tq = T.propagate_real(ens, spec, FieldSpec.driven([15.0, 0.0]), 0.001, 1000, 1000)
    norm_err = max(norm_err, float(np.max(np.abs(tq.final.norms() - 1))))
    if norm_err > 1e-10:
        problems.append(f"norm drift {norm_err:.1e}")

    # density matrix trace and Hermiticity on a driven interacting state
    rho = reduced_density_exact(run.final, 1)
    dm_err = max(abs(rho.trace() - 1), rho.hermiticity_error())
    if dm_err > 1e-8:
        problems.append(f"density matrix error {dm_err:.1e}")

    # kernel limits
    e = T.init_ensemble(200, 1.0, grid.axis1, 1e-6, seed=2)
    x = grid.axis1.x
    v_pair = T.effective_potential(e, spec, 1, 7)
    from nonlocality.model import soft_core_potential

    pair_err = float(np.max(np.abs(v_pair - soft_core_potential(x, e.walkers[1, 7], spec))))
    e.sigma[:] = 1e7
    V = T.effective_potentials(e, spec)
    hf_err = float(np.max(np.abs(V[0] - V[0, :1])))
    if max(pair_err, hf_err) > 1e-6:
        problems.append(f"kernel limits {pair_err:.1e}/{hf_err:.1e}")

    # walker histogram stationarity under drift-diffusion in the harmonic ground state
    g1 = grid.axis1
    M = 10_000
    phi = T.harmonic_wave(g1, off)
    big = T.init_ensemble(M, 1.0, g1, 1.0, seed=3, n_electrons=1)
    big.walkers[:] = np.linspace(-3, 3, M)[None, :]
    big.waves = np.broadcast_to(phi, (1, M, g1.n_points)).copy()
    params = T.ImaginaryStepParams(dtau=0.01)
    prop = T.TdqmcPropagator(g1, off, None, 0.01, T.IMAGINARY)
    for _ in range(400):
        T.walker_drift_diffusion_step(big, params, prop)
    ks = stats.kstest(big.walkers[0], stats.norm(scale=np.sqrt(0.5)).cdf).statistic
    if ks >= 0.05:
        problems.append(f"KS distance {ks:.3f}")

    # determinism across worker counts
    outs = []
    for workers in (1, 4):
        ens = T.init_ensemble(64, 1.0, g1, 0.82, seed=9)
        res = T.prepare_ground_state(ens, spec, stage1_steps=20, stage2_tol=1e-4, workers=workers)
        r = T.propagate_real(res.ensemble, spec, FieldSpec.driven([15.0, 0.0]), 0.005, 20, 5, workers=workers)
        outs.append((res.ensemble.walkers.copy(), r.final.waves.copy(), r.trajectories.copy()))
    same = all(np.array_equal(a, b) for a, b in zip(*outs))
    if not same:
        problems.append("worker count changes results")

    dt = time.perf_counter() - t0
    verdict(
        11,
        not problems,
        f"norm {norm_err:.1e}, rho {dm_err:.1e}, kernel {max(pair_err, hf_err):.1e}, KS {ks:.3f}, "
        f"bit-exact across workers: {same}, {dt:.0f} s" + (f"; problems: {problems}" if problems else ""),
    )
