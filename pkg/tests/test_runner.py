import numpy as np
import pytest
import yaml

from nonlocality import spectral2d as S
from nonlocality import tdqmc as T
from nonlocality.analysis import SweepRow, SweepTable
from nonlocality.entanglement import EntropySeries
from nonlocality.model import ConfigError, Grid2D, SystemSpec
from nonlocality.runner import io
from nonlocality.runner.cli import main
from nonlocality.runner.config import RunConfig, dump_config, parse_config
from nonlocality.runner.scenarios import run_scenario

TINY = [
    "--set", "grid.n_points=32",
    "--set", "grid.span=16",
    "--set", "exact.energy_tol=1e-8",
    "--set", "exact.dtau=0.01",
    "--set", "evolve.duration=0.2",
    "--set", "exact.n_statistics_trajectories=4",
    "--set", "tdqmc.M=20",
    "--set", "tdqmc.stage1_steps=10",
    "--set", "tdqmc.stage2_tol=1e-3",
]


# -- configuration --------------------------------------------------------------


def test_empty_config_gives_defaults(tmp_path):
    cfg = parse_config(None, env={})
    assert cfg == RunConfig()
    assert (cfg.grid.span, cfg.grid.n_points) == (20.0, 256)
    assert (cfg.tdqmc.sigma, cfg.tdqmc.M, cfg.seed) == (0.82, 1000, 42)
    empty = tmp_path / "empty.yaml"
    empty.write_text("")
    assert parse_config(empty, env={}) == cfg


def test_negative_sigma_names_key(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("tdqmc:\n  sigma: -1\n")
    with pytest.raises(ConfigError, match="tdqmc.sigma"):
        parse_config(p, env={})


def test_unknown_key_rejected_with_path(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("tdqmc:\n  walkers: 5\n")
    with pytest.raises(ConfigError, match="tdqmc.walkers"):
        parse_config(p, env={})
    with pytest.raises(ConfigError, match="scenario"):
        parse_config(None, {"scenario": "fig9"}, env={})


def test_config_roundtrip(tmp_path):
    cfg = parse_config(None, {"tdqmc.M": "200", "sweep.sigmas": "[0.5, 0.9]", "seed": 7}, env={})
    p = tmp_path / "c.yaml"
    p.write_text(dump_config(cfg))
    assert parse_config(p, env={}) == cfg
    assert cfg.tdqmc.M == 200 and cfg.sweep.sigmas == (0.5, 0.9)


def test_output_env_and_precedence(tmp_path):
    assert parse_config(None, env={"NONLOCALITY_OUT": "x"}).out == "x"
    p = tmp_path / "c.yaml"
    p.write_text("out: from_file\nseed: 3\n")
    cfg = parse_config(p, {"seed": 9}, env={"NONLOCALITY_OUT": "x"})
    assert (cfg.out, cfg.seed) == ("from_file", 9)


def test_bad_types_rejected():
    with pytest.raises(ConfigError, match="tdqmc.M"):
        parse_config(None, {"tdqmc.M": "many"}, env={})
    with pytest.raises(ConfigError, match="grid.n_points"):
        parse_config(None, {"grid.n_points": 100}, env={})


# -- CSV --------------------------------------------------------------------------


def test_dipole_csv_lines(tmp_path):
    series = S.DipoleSeries([0.0, 0.1, 0.2], [[0, 0], [1, 2], [3, 4]])
    path = io.emit_plot_data(series, tmp_path / "d.csv")
    lines = path.read_text().splitlines()
    assert len(lines) == 4 and lines[0] == "t,d1,d2"
    header, data = io.read_csv(path)
    assert np.allclose(data[:, 2], [0, 2, 4])


def test_entropy_columns_and_refusal(tmp_path):
    s = EntropySeries([0.0, 1.0], {"S_exact": [0.1, 0.2]})
    s.add("S_tdqmc_0.82", [0.11, 0.19])
    p = io.emit_plot_data(s, tmp_path / "e.csv", gnuplot=True)
    assert p.read_text().splitlines()[0] == "t,S_exact,S_tdqmc_0.82"
    assert p.with_suffix(".gp").exists()
    with pytest.raises(io.OutputExistsError):
        io.emit_plot_data(s, p)
    io.emit_plot_data(s, p, force=True)


def test_empty_series_refused(tmp_path):
    with pytest.raises(ValueError):
        io.emit_plot_data(S.DipoleSeries([], np.zeros((0, 2))), tmp_path / "x.csv")


def test_sweep_table_csv(tmp_path):
    t = SweepTable([SweepRow(0.5, 1.8, 0.01, 42, 10), SweepRow(0.4, 1.9, 0.02, 42, 10)])
    header, data = io.read_csv(io.emit_plot_data(t, tmp_path / "s.csv"))
    assert header[:3] == ["sigma", "E", "E_stderr"]
    assert np.allclose(data[:, 0], [0.4, 0.5])


def test_summary_roundtrip(tmp_path):
    p = io.write_summary(tmp_path / "r.txt", {"sigma_star": 0.81, "scenario": "fig1a"})
    assert io.read_summary(p) == {"sigma_star": 0.81, "scenario": "fig1a"}


# -- checkpoints --------------------------------------------------------------------


@pytest.fixture
def psi():
    g = Grid2D.square(32, 16.0)
    return S.split_step(S.init_gaussian(g, 1.0), 0.01, SystemSpec(), S.FieldSpec.driven([1.0, 0.0]))


def test_wavefunction_checkpoint_bit_exact(tmp_path, psi):
    a = io.checkpoint_save(psi, tmp_path / "a.bin")
    loaded = io.checkpoint_load(a)
    assert np.array_equal(loaded.amplitudes, psi.amplitudes) and loaded.time == psi.time
    b = io.checkpoint_save(loaded, tmp_path / "b.bin")
    assert a.read_bytes() == b.read_bytes()


@pytest.mark.parametrize("offset", [12, -5, 5])
def test_corrupted_checkpoint_rejected(tmp_path, psi, offset):
    p = io.checkpoint_save(psi, tmp_path / "a.bin")
    data = bytearray(p.read_bytes())
    data[offset] ^= 0xFF
    p.write_bytes(bytes(data))
    with pytest.raises(io.CheckpointError):
        io.checkpoint_load(p)


def test_wrong_kind_rejected(tmp_path, psi):
    p = io.checkpoint_save(psi, tmp_path / "a.bin")
    with pytest.raises(io.CheckpointError):
        io.load_ensemble(p)


def test_resume_mid_relaxation(tmp_path):
    g = Grid2D.square(32, 16.0)
    spec = SystemSpec()
    prop = S.SplitStepPropagator(g, spec, None, 0.01, S.IMAGINARY)
    amp = S.init_gaussian(g, 1.0).amplitudes
    straight = amp
    for _ in range(200):
        straight = prop.step(straight, 0.0)
    half = amp
    for _ in range(100):
        half = prop.step(half, 0.0)
    p = io.checkpoint_save(S.WaveFunction2D(g, half, 1.0), tmp_path / "mid.bin")
    resumed = io.checkpoint_load(p).amplitudes
    for _ in range(100):
        resumed = prop.step(resumed, 0.0)
    e1 = S.energy_expectation(S.WaveFunction2D(g, straight), spec)
    e2 = S.energy_expectation(S.WaveFunction2D(g, resumed), spec)
    assert abs(e1 - e2) < 1e-12


def test_ensemble_checkpoint_resumes_rng(tmp_path, grid1d, spec):
    ens = T.init_ensemble(12, 1.0, grid1d, 0.8, seed=5)
    straight = ens.copy()
    T.run_stage1(straight, spec, 6)
    T.run_stage1(ens, spec, 3)
    p = io.checkpoint_save(ens, tmp_path / "e.bin")
    resumed = io.checkpoint_load(p)
    T.run_stage1(resumed, spec, 3)
    assert np.array_equal(resumed.walkers, straight.walkers)
    assert np.array_equal(resumed.waves, straight.waves)
    q = io.checkpoint_save(io.checkpoint_load(p), tmp_path / "f.bin")
    assert p.read_bytes() == q.read_bytes()


# -- scenarios and CLI ------------------------------------------------------------


def test_unknown_scenario_lists_available():
    with pytest.raises(ConfigError, match="fig1a, fig1bc, fig2, fig3"):
        run_scenario("fig9", RunConfig())


def test_cli_exit_codes(tmp_path, capsys):
    assert main(["scenario", "nope", "--out", str(tmp_path)]) == 1
    assert main(["ground-exact", "--set", "tdqmc.sigma=-1"]) == 1
    assert main(["ground-exact", "--config", str(tmp_path / "missing.yaml")]) == 1
    blocked = tmp_path / "file"
    blocked.write_text("")
    assert main(["ground-exact", "--out", str(blocked), *TINY]) == 3
    assert main(["ground-exact", "--out", str(tmp_path), "--set", "exact.max_steps=5", *TINY]) == 2


def test_cli_ground_exact_and_scenario(tmp_path, capsys):
    assert main(["ground-exact", "--out", str(tmp_path), *TINY]) == 0
    summary = io.read_summary(tmp_path / "ground_exact" / "summary.txt")
    assert 1.7 < summary["energy"] < 1.9
    assert main(["scenario", "fig2", "--out", str(tmp_path), "--seed", "3", *TINY]) == 0
    report = io.read_summary(tmp_path / "fig2" / "report.txt")
    assert report["seed"] == 3
    assert report["tdqmc_idler_max_motion"] == 0.0
    assert report["exact_idler_dipole_max"] < 1e-3
    cfg = yaml.safe_load((tmp_path / "fig2" / "config.yaml").read_text())
    assert cfg["grid"]["n_points"] == 32
    # a second run without --force must refuse to overwrite its CSVs
    assert main(["scenario", "fig2", "--out", str(tmp_path), "--seed", "3", *TINY]) == 3
    assert main(["scenario", "fig2", "--out", str(tmp_path), "--seed", "3", "--force", *TINY]) == 0


def test_cli_tdqmc_commands(tmp_path, capsys):
    small = TINY + ["--set", "sweep.sigmas=[0.5,0.7,0.9,1.1,1.3]", "--set", "entropy.sigmas=[0.8]"]
    assert main(["ground-tdqmc", "--out", str(tmp_path), *small]) == 0
    assert (tmp_path / "ground_tdqmc" / "history.csv").exists()
    assert main(["sweep", "--out", str(tmp_path), *small]) == 0
    assert "sigma_star" in io.read_summary(tmp_path / "fig1a" / "report.txt")
    assert main(["evolve", "--out", str(tmp_path), "--set", "system.interaction_on=false", *small]) == 0
    assert main(["entropy", "--out", str(tmp_path), "--driven", "1,2", *small]) == 0
    header, _ = io.read_csv(tmp_path / "entropy" / "entropy.csv")
    assert header == ["t", "S_exact", "S_tdqmc_0.8"]


def test_scenario_reproducible(tmp_path):
    cfg = parse_config(None, {"out": str(tmp_path / "a"), "grid.n_points": 32, "grid.span": 16.0,
                              "tdqmc.M": 16, "tdqmc.stage1_steps": 5, "tdqmc.stage2_tol": 1e-3,
                              "evolve.duration": 0.1, "solver": "tdqmc"}, env={})
    a = run_scenario("fig2", cfg).headline
    from nonlocality.runner.scenarios import clear_caches

    clear_caches()
    cfg2 = parse_config(None, {**{k: v for k, v in cfg.to_dict().items() if not isinstance(v, dict)},
                               "out": str(tmp_path / "b"), "workers": 3,
                               "grid.n_points": 32, "grid.span": 16.0, "tdqmc.M": 16, "tdqmc.stage1_steps": 5,
                               "tdqmc.stage2_tol": 1e-3, "evolve.duration": 0.1}, env={})
    b = run_scenario("fig2", cfg2).headline
    assert a == b
    assert (tmp_path / "a" / "fig2" / "tdqmc_dipoles.csv").read_bytes() == (tmp_path / "b" / "fig2" / "tdqmc_dipoles.csv").read_bytes()
