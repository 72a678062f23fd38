"""Named experiments: the energy sweep, the exact ground state, and the two nonlocality studies.

Each scenario writes CSV series plus a ``report.txt`` key-value summary into
``<out>/<scenario>/`` and returns a ScenarioReport.  Ground states are cached
per process so scenarios (and tests) that share settings do not relax twice.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .. import spectral2d as S
from .. import tdqmc as T
from ..analysis import SweepRow, SweepTable, ehrenfest_closed_form, idler_ratio, polyfit_min, sigma_sweep
from ..entanglement import EntropySeries, linear_entropy, reduced_density_exact
from ..model import ConfigError, FieldSpec, Grid2D, RngStream, SystemSpec
from . import io
from .config import SCENARIOS, RunConfig, save_config

log = logging.getLogger(__name__)

TRAJECTORY_STREAM = 7
ENTROPY_INTERVAL = 0.05
BUILDUP_STRIDE = 100


@dataclass
class ScenarioReport:
    scenario: str
    files: list = field(default_factory=list)
    headline: dict = field(default_factory=dict)
    runtime: float = 0.0
    seed: int = 0

    def missing_files(self) -> list:
        return [f for f in self.files if not Path(f).exists()]


# -- exact solver pipeline ------------------------------------------------------


@lru_cache(maxsize=4)
def _relax_cached(grid: Grid2D, spec: SystemSpec, width: float, dtau: float, tol: float, max_steps: int):
    psi0 = S.init_gaussian(grid, width)
    return S.relax_ground_state(psi0, spec, dtau, tol, max_steps=max_steps, snapshot_stride=BUILDUP_STRIDE)


def ground_psi(cfg: RunConfig) -> S.WaveFunction2D:
    """Interacting exact ground state as the t = 0 state of a real-time run."""
    psi = exact_ground_state(cfg, True).psi
    return S.WaveFunction2D(psi.grid, psi.amplitudes.copy(), 0.0)


def exact_ground_state(cfg: RunConfig, interaction_on: bool = True) -> S.RelaxationResult:
    """Relaxed two-body ground state with build-up snapshots.

    Cached per process; treat the returned arrays as read-only.
    """
    e = cfg.exact
    return _relax_cached(cfg.grid2d(), cfg.system_spec(interaction_on), e.width, e.dtau, e.energy_tol, e.max_steps)


@dataclass
class ExactRun:
    dipoles: S.DipoleSeries
    trajectories: S.TrajectorySet
    entropy_times: np.ndarray
    entropy: np.ndarray
    final: S.WaveFunction2D


def exact_run(
    cfg: RunConfig,
    psi0: S.WaveFunction2D,
    spec: SystemSpec,
    fields: FieldSpec,
    start_points: np.ndarray,
) -> ExactRun:
    """Real-time run recording dipoles, Bohmian trajectories and entropy in one pass."""
    e = cfg.exact
    sched = S.PropagationSchedule.for_duration(cfg.evolve.duration, e.dt, e.snapshot_stride)
    every = max(1, int(round(ENTROPY_INTERVAL / (e.dt * e.snapshot_stride))))
    times, dips, ent_t, ent = [], [], [], []
    last = [psi0]

    def observed():
        for n, wf in enumerate(S.iter_real(psi0, spec, fields, sched)):
            times.append(wf.time)
            dips.append(wf.mean_positions())
            if n % every == 0:
                ent_t.append(wf.time)
                ent.append(linear_entropy(reduced_density_exact(wf, 1)))
            last[0] = wf
            yield wf

    traj = S.evolve_trajectories(observed(), start_points)
    return ExactRun(S.DipoleSeries(times, dips), traj, np.array(ent_t), np.array(ent), last[0])


def trajectory_starts(cfg: RunConfig, psi0: S.WaveFunction2D) -> np.ndarray:
    n = cfg.exact.n_trajectories + cfg.exact.n_statistics_trajectories
    return S.sample_density(psi0, n, RngStream(cfg.seed, TRAJECTORY_STREAM))


@dataclass
class ExactPair:
    """A driven run and its field-free companion from the same state and start points."""

    driven: ExactRun
    free: ExactRun

    @property
    def dipoles(self) -> S.DipoleSeries:
        return S.subtract_reference(self.driven.dipoles, self.free.dipoles)

    @property
    def trajectories(self) -> S.TrajectorySet:
        return S.subtract_reference(self.driven.trajectories, self.free.trajectories)


def exact_pair(cfg: RunConfig, interaction_on: bool, driven=(1,)) -> ExactPair:
    psi0 = ground_psi(cfg)
    spec = cfg.system_spec(interaction_on)
    starts = trajectory_starts(cfg, psi0)
    a = exact_run(cfg, psi0, spec, cfg.driving(driven), starts)
    b = exact_run(cfg, psi0, spec, FieldSpec.off(2), starts)
    return ExactPair(a, b)


# -- TDQMC pipeline -------------------------------------------------------------

_TDQMC_CACHE: dict = {}


def tdqmc_ground_state(
    cfg: RunConfig, sigma: float | None = None, seed: int | None = None, interaction_on: bool = True
) -> T.GroundStateResult:
    """Two-stage TDQMC ground state; returns a fresh copy of the cached ensemble.

    Energies and entropy are logged every 20 imaginary-time steps for the
    build-up curves.
    """
    q = cfg.tdqmc
    sigma = q.sigma if sigma is None else float(sigma)
    seed = cfg.seed if seed is None else int(seed)
    spec = cfg.system_spec(interaction_on)
    params = T.ImaginaryStepParams(q.dtau, q.diffusion, q.include_drift)
    key = (cfg.grid1d(), spec, sigma, seed, q.M, q.width, params, q.stage1_steps, q.stage2_tol, q.stage2_max_steps)
    if key not in _TDQMC_CACHE:
        ens = T.init_ensemble(q.M, q.width, cfg.grid1d(), sigma, seed)
        res = T.prepare_ground_state(
            ens,
            spec,
            q.stage1_steps,
            q.stage2_tol,
            params,
            q.stage2_max_steps,
            record_stride=20,
            workers=cfg.workers,
        )
        _TDQMC_CACHE[key] = res
    res = _TDQMC_CACHE[key]
    return T.GroundStateResult(res.ensemble.copy(), res.energy, res.stage1_energy, list(res.history), res.converged, res.stage2_steps)


def clear_caches() -> None:
    _TDQMC_CACHE.clear()
    _relax_cached.cache_clear()


def tdqmc_run(cfg: RunConfig, ens: T.TdqmcEnsemble, spec: SystemSpec, fields: FieldSpec, record_entropy: bool = True) -> T.TdqmcRealTimeRun:
    q = cfg.tdqmc
    n_steps = int(round(cfg.evolve.duration / q.dt))
    return T.propagate_real(
        ens, spec, fields, q.dt, n_steps, q.record_stride, workers=cfg.workers, record_entropy=record_entropy
    )


@dataclass
class TdqmcPair:
    driven: T.TdqmcRealTimeRun
    free: T.TdqmcRealTimeRun
    ground: T.GroundStateResult

    @property
    def dipoles(self) -> S.DipoleSeries:
        return S.DipoleSeries(self.driven.times, self.driven.walker_dipoles - self.free.walker_dipoles)


def tdqmc_pair(cfg: RunConfig, interaction_on: bool, driven=(1,), sigma: float | None = None) -> TdqmcPair:
    gs = tdqmc_ground_state(cfg, sigma)
    spec = cfg.system_spec(interaction_on)
    a = tdqmc_run(cfg, gs.ensemble.copy(), spec, cfg.driving(driven))
    b = tdqmc_run(cfg, gs.ensemble.copy(), spec, FieldSpec.off(2))
    return TdqmcPair(a, b, gs)


# -- helpers --------------------------------------------------------------------


def _outdir(cfg: RunConfig, name: str) -> Path:
    d = Path(cfg.out) / name
    d.mkdir(parents=True, exist_ok=True)
    return d


def _emit(report: ScenarioReport, cfg: RunConfig, series, path: Path) -> None:
    report.files.append(str(io.emit_plot_data(series, path, force=cfg.force)))


def _oracle_error(cfg: RunConfig, times: np.ndarray, d: np.ndarray, electron: int = 1) -> float:
    ref = ehrenfest_closed_form(cfg.driving((1, 2))[electron], cfg.system.confinement_strength, times)
    return float(np.max(np.abs(d - ref)))


def _aligned(t_ref: np.ndarray, t: np.ndarray, values: np.ndarray) -> np.ndarray:
    return np.interp(t_ref, t, values)


def _float_key(x: float) -> str:
    return f"{x:g}"


def sweep_table(cfg: RunConfig, sigmas=None) -> SweepTable:
    q = cfg.tdqmc
    spec = cfg.system_spec()

    def point(sigma, seed):
        res = tdqmc_ground_state(cfg, sigma, seed, spec.interaction_on)
        return SweepRow(
            sigma,
            res.energy.E2,
            res.energy.stderr2,
            seed,
            q.M,
            res.converged,
            res.energy.E1,
            T.ensemble_entropy(res.ensemble),
        )

    sigmas = cfg.sweep.sigmas if sigmas is None else sigmas
    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            return sigma_sweep(sigmas, point, cfg.seed, cfg.sweep.common_random_numbers, pool)
    return sigma_sweep(sigmas, point, cfg.seed, cfg.sweep.common_random_numbers)


# -- scenarios --------------------------------------------------------------------


def scenario_fig1a(cfg: RunConfig, report: ScenarioReport) -> None:
    out = _outdir(cfg, "fig1a")
    table = sweep_table(cfg)
    _emit(report, cfg, table, out / "sweep.csv")
    fit = polyfit_min(table, cfg.sweep.degree)
    coef = fit.coefficients[::-1]
    _emit(report, cfg, (["power", "coefficient"], [np.arange(len(coef)), coef]), out / "fit.csv")
    raw = table.usable().raw_minimum()
    report.headline.update(
        sigma_star=fit.sigma_star,
        E_star=fit.energy_star,
        fit_residual=fit.residual_norm,
        fit_condition=fit.condition_number,
        fit_degree=fit.degree,
        fit_unique=fit.unique,
        raw_min_sigma=raw.sigma,
        raw_min_E=raw.energy,
        n_points=len(table.rows),
        n_converged=len(table.usable().rows),
    )
    fit_summary = {k: report.headline[k] for k in ("sigma_star", "E_star", "fit_residual", "fit_degree")}
    report.files.append(str(io.write_summary(out / "fit_summary.txt", fit_summary, force=cfg.force)))


def _density_columns(psi: S.WaveFunction2D, stride: int = 2):
    x1, x2 = psi.grid.mesh()
    sl = (slice(None, None, stride), slice(None, None, stride))
    return ["x1", "x2", "density"], [x1[sl].ravel(), x2[sl].ravel(), psi.density()[sl].ravel()]


def scenario_fig1bc(cfg: RunConfig, report: ScenarioReport) -> None:
    """Exact ground state and the state after a few field cycles with V_ee switched off."""
    out = _outdir(cfg, "fig1bc")
    gs = exact_ground_state(cfg, True)
    sched = S.PropagationSchedule.for_duration(cfg.evolve.duration, cfg.exact.dt, cfg.exact.snapshot_stride)
    run = S.propagate_real(ground_psi(cfg), cfg.system_spec(False), cfg.driving((1,)), sched, keep_snapshots=False)
    _emit(report, cfg, _density_columns(gs.psi), out / "density_t0.csv")
    _emit(report, cfg, _density_columns(run.final), out / "density_driven.csv")
    _emit(report, cfg, run.dipoles, out / "dipoles.csv")
    for name, wf in (("ground_state.bin", gs.psi), ("driven_state.bin", run.final)):
        report.files.append(str(io.checkpoint_save(wf, out / name, force=True)))
    report.headline.update(
        exact_energy=gs.energy,
        exact_relax_steps=gs.n_steps,
        final_time=run.final.time,
        final_norm=run.final.norm(),
        ground_entropy=linear_entropy(reduced_density_exact(gs.psi, 1)),
    )


def _entropy_outputs(cfg, report, out: Path, exact: ExactRun, tdqmc: dict, buildups: dict, tag=""):
    """Write the build-up and real-time entropy CSVs; ``tdqmc`` maps sigma -> TdqmcRealTimeRun."""
    t = exact.entropy_times
    series = EntropySeries(t, {"S_exact": exact.entropy})
    for sigma, run in tdqmc.items():
        series.add(f"S_tdqmc_{_float_key(sigma)}", _aligned(t, run.times, run.entropy))
    _emit(report, cfg, series, out / f"entropy{tag}.csv")
    relax = exact_ground_state(cfg, True)
    states = [w for w in relax.snapshots if w.time < relax.psi.time] + [relax.psi]
    taus = np.array([w.time for w in states])
    s_ex = np.array([linear_entropy(reduced_density_exact(w, 1)) for w in states])
    _emit(report, cfg, EntropySeries(taus - taus[-1], {"S_exact": s_ex}), out / f"entropy_buildup_exact{tag}.csv")
    for sigma, hist in buildups.items():
        h = np.array(hist)
        label = f"S_tdqmc_{_float_key(sigma)}"
        _emit(
            report,
            cfg,
            (["t", "stage", label, "E2"], [h[:, 0] - h[-1, 0], h[:, 1], h[:, 5], h[:, 3]]),
            out / f"entropy_buildup_tdqmc_{_float_key(sigma)}{tag}.csv",
        )


def scenario_fig2(cfg: RunConfig, report: ScenarioReport) -> None:
    """Nonlocal causality: interaction switched off for t > 0, only electron 1 driven."""
    out = _outdir(cfg, "fig2")
    h = report.headline
    if cfg.solver in ("exact", "both"):
        gs = exact_ground_state(cfg, True)
        pair = exact_pair(cfg, interaction_on=False, driven=(1,))
        K = cfg.exact.n_trajectories
        shown = lambda ts: S.TrajectorySet(ts.times, ts.positions[:, :K], ts.flags[:K], ts.exited[:K])  # noqa: E731
        _emit(report, cfg, pair.driven.dipoles, out / "exact_dipoles.csv")
        _emit(report, cfg, pair.free.dipoles, out / "exact_dipoles_free.csv")
        _emit(report, cfg, pair.dipoles, out / "exact_dipoles_subtracted.csv")
        _emit(report, cfg, shown(pair.driven.trajectories), out / "exact_trajectories.csv")
        _emit(report, cfg, shown(pair.trajectories), out / "exact_trajectories_subtracted.csv")
        sub = pair.dipoles
        raw_dev = np.nanmax(np.abs(pair.driven.trajectories.displacement(2)[:, :K]))
        h.update(
            exact_energy=gs.energy,
            exact_idler_dipole_max=float(np.max(np.abs(pair.driven.dipoles.d(2)))),
            exact_idler_dipole_max_subtracted=float(np.max(np.abs(sub.d(2)))),
            exact_idler_traj_max_deviation=float(raw_dev),
            exact_idler_traj_max_deviation_subtracted=float(np.nanmax(np.abs(pair.trajectories.x(2)[:, :K]))),
            exact_driven_dipole_oracle_error=_oracle_error(cfg, sub.times, sub.d(1)),
            exact_trajectory_flags=int(pair.driven.trajectories.flags.sum()),
            exact_trajectories_exited=int(pair.driven.trajectories.exited.sum()),
        )
    if cfg.solver in ("tdqmc", "both"):
        tp = tdqmc_pair(cfg, interaction_on=False, driven=(1,))
        d = tp.dipoles
        _emit(report, cfg, S.DipoleSeries(tp.driven.times, tp.driven.walker_dipoles), out / "tdqmc_dipoles.csv")
        _emit(report, cfg, d, out / "tdqmc_dipoles_subtracted.csv")
        a, b = tp.driven, tp.free
        h.update(
            tdqmc_E1=tp.ground.energy.E1,
            tdqmc_E2=tp.ground.energy.E2,
            tdqmc_E2_stderr=tp.ground.energy.stderr2,
            tdqmc_idler_max_motion=float(np.max(np.abs(a.trajectories[:, 1] - b.trajectories[:, 1]))),
            tdqmc_idler_max_velocity_change=float(
                np.max(np.abs(T.walker_velocities(a.final)[1] - T.walker_velocities(b.final)[1]))
            ),
            tdqmc_idler_wave_max_change=float(np.max(np.abs(a.final.waves[1] - b.final.waves[1]))),
            tdqmc_idler_dipole_max_subtracted=float(np.max(np.abs(d.d(2)))),
            tdqmc_driven_dipole_oracle_error=_oracle_error(cfg, d.times, d.d(1)),
            tdqmc_driven_dipole_stderr=float(np.max(tp.driven.walker_stderr[:, 0])),
        )
        if cfg.solver == "both":
            s_ex = pair.driven.entropy
            s_tq = _aligned(pair.driven.entropy_times, tp.driven.times, tp.driven.entropy)
            _entropy_outputs(cfg, report, out, pair.driven, {cfg.tdqmc.sigma: tp.driven}, {cfg.tdqmc.sigma: tp.ground.history})
            h.update(
                entropy_exact_plateau=float(s_ex[0]),
                entropy_tdqmc_plateau=float(s_tq[0]),
                entropy_max_relative_deviation=float(np.max(np.abs(s_tq - s_ex) / s_ex)),
            )


def scenario_fig3(cfg: RunConfig, report: ScenarioReport) -> None:
    """Spatial nonlocality: interaction kept on; (a) electron 1 driven, (b) both driven."""
    out = _outdir(cfg, "fig3")
    h = report.headline
    exact_both = None
    if cfg.solver in ("exact", "both"):
        inter = exact_pair(cfg, interaction_on=True, driven=(1,))
        nonint = exact_pair(cfg, interaction_on=False, driven=(1,))
        _emit(report, cfg, inter.dipoles, out / "exact_dipoles_subtracted.csv")
        _emit(report, cfg, nonint.trajectories, out / "exact_nonint_trajectories_subtracted.csv")
        ratio = idler_ratio(inter.dipoles.d(2), nonint.trajectories.x(2))
        h.update(
            exact_idler_dipole_max=ratio.numerator,
            nonint_idler_traj_max_subtracted=ratio.denominator,
            idler_ratio=ratio.ratio,
            idler_ratio_infinite=ratio.infinite,
        )
        psi0 = ground_psi(cfg)
        exact_both = exact_run(cfg, psi0, cfg.system_spec(True), cfg.driving((1, 2)), trajectory_starts(cfg, psi0)[:1])
    if cfg.solver in ("tdqmc", "both"):
        tp = tdqmc_pair(cfg, interaction_on=True, driven=(1,))
        _emit(report, cfg, tp.dipoles, out / "tdqmc_dipoles_subtracted.csv")
        h.update(tdqmc_idler_dipole_max=float(np.max(np.abs(tp.dipoles.d(2)))))
        runs, hists = {}, {}
        sigmas = sorted(set(cfg.entropy.sigmas) | {cfg.tdqmc.sigma})
        for sigma in sigmas:
            gs = tdqmc_ground_state(cfg, sigma)
            runs[sigma] = tdqmc_run(cfg, gs.ensemble, cfg.system_spec(True), cfg.driving((1, 2)))
            hists[sigma] = gs.history
            h[f"entropy_tdqmc_plateau_{_float_key(sigma)}"] = float(runs[sigma].entropy[0])
        if exact_both is not None:
            _entropy_outputs(cfg, report, out, exact_both, runs, hists)
            s_ex = exact_both.entropy
            s_tq = _aligned(exact_both.entropy_times, runs[cfg.tdqmc.sigma].times, runs[cfg.tdqmc.sigma].entropy)
            h.update(
                entropy_exact_plateau=float(s_ex[0]),
                entropy_max_relative_deviation=float(np.max(np.abs(s_tq - s_ex) / s_ex)),
            )


_DISPATCH = {
    "fig1a": scenario_fig1a,
    "fig1bc": scenario_fig1bc,
    "fig2": scenario_fig2,
    "fig3": scenario_fig3,
}


def run_scenario(name: str, cfg: RunConfig) -> ScenarioReport:
    if name not in _DISPATCH:
        raise ConfigError(f"unknown scenario {name!r}; available: {', '.join(SCENARIOS)}")
    t0 = time.perf_counter()
    report = ScenarioReport(name, seed=cfg.seed)
    out = _outdir(cfg, name)
    report.files.append(str(save_config(cfg, out / "config.yaml")))
    _DISPATCH[name](cfg, report)
    report.runtime = time.perf_counter() - t0
    summary = {"scenario": name, "seed": cfg.seed, "runtime_s": report.runtime, **report.headline}
    report.files.append(str(io.write_summary(out / "report.txt", summary, force=True)))
    missing = report.missing_files()
    if missing:
        raise OSError(f"scenario {name} did not produce {missing}")
    return report
