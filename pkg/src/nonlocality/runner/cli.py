"""Command-line entry point.

Exit codes: 0 success, 1 invalid configuration, 2 numerical failure, 3 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .. import tdqmc as T
from ..entanglement import EntropySeries, linear_entropy, reduced_density_exact
from ..model import ConfigError, FieldSpec, NumericalError
from . import io
from . import scenarios as sc
from .config import SCENARIOS, parse_config

log = logging.getLogger("nonlocality")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3


def _overrides(args) -> dict:
    out = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value
    for flag, key in (("seed", "seed"), ("out", "out"), ("workers", "workers"), ("solver", "solver")):
        value = getattr(args, flag, None)
        if value is not None:
            out[key] = value
    if args.force:
        out["force"] = True
    return out


def _config(args, scenario: str | None = None):
    ov = _overrides(args)
    if scenario is not None:
        ov["scenario"] = scenario
    return parse_config(args.config, ov)


def _print(values: dict) -> None:
    for k, v in values.items():
        print(f"{k} = {v}")


def cmd_ground_exact(args) -> int:
    cfg = _config(args)
    out = Path(cfg.out) / "ground_exact"
    res = sc.exact_ground_state(cfg, cfg.system.interaction_on)
    io.checkpoint_save(res.psi, out / "ground_state.bin", force=True)
    summary = {
        "energy": res.energy,
        "relax_steps": res.n_steps,
        "entropy": linear_entropy(reduced_density_exact(res.psi, 1)),
        "interaction_on": cfg.system.interaction_on,
    }
    io.write_summary(out / "summary.txt", summary, force=cfg.force)
    _print(summary)
    return EXIT_OK


def cmd_ground_tdqmc(args) -> int:
    cfg = _config(args)
    out = Path(cfg.out) / "ground_tdqmc"
    res = sc.tdqmc_ground_state(cfg, interaction_on=cfg.system.interaction_on)
    h = np.array(res.history)
    io.emit_plot_data((["tau", "stage", "E1", "E2", "E2_stderr", "S"], list(h.T)), out / "history.csv", cfg.force)
    io.checkpoint_save(res.ensemble, out / "ensemble.bin", force=True)
    summary = {
        "sigma": cfg.tdqmc.sigma,
        "M": cfg.tdqmc.M,
        "seed": cfg.seed,
        "E1": res.energy.E1,
        "E1_stderr": res.energy.stderr1,
        "E2": res.energy.E2,
        "E2_stderr": res.energy.stderr2,
        "converged": res.converged,
        "stage2_steps": res.stage2_steps,
        "entropy": T.ensemble_entropy(res.ensemble),
    }
    io.write_summary(out / "summary.txt", summary, force=cfg.force)
    _print(summary)
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _config(args, "fig1a")
    report = sc.run_scenario("fig1a", cfg)
    _print(report.headline)
    return EXIT_OK


def _driven(args) -> tuple:
    return tuple(int(i) for i in args.driven.split(","))


def cmd_evolve(args) -> int:
    """Driven real-time run with its field-free companion; writes raw and subtracted dipoles."""
    cfg = _config(args)
    out = Path(cfg.out) / "evolve"
    on = cfg.system.interaction_on
    driven = _driven(args)
    summary = {"interaction_on": on, "driven": args.driven}
    if cfg.solver in ("exact", "both"):
        pair = sc.exact_pair(cfg, on, driven)
        io.emit_plot_data(pair.driven.dipoles, out / "exact_dipoles.csv", cfg.force)
        io.emit_plot_data(pair.dipoles, out / "exact_dipoles_subtracted.csv", cfg.force)
        summary["exact_idler_dipole_max_subtracted"] = float(np.max(np.abs(pair.dipoles.d(2))))
    if cfg.solver in ("tdqmc", "both"):
        tp = sc.tdqmc_pair(cfg, on, driven)
        io.emit_plot_data(tp.dipoles, out / "tdqmc_dipoles_subtracted.csv", cfg.force)
        summary["tdqmc_idler_dipole_max_subtracted"] = float(np.max(np.abs(tp.dipoles.d(2))))
    io.write_summary(out / "summary.txt", summary, force=cfg.force)
    _print(summary)
    return EXIT_OK


def cmd_entropy(args) -> int:
    """Electron-1 linear entropy along a driven run, exact and/or TDQMC at each configured sigma."""
    cfg = _config(args)
    out = Path(cfg.out) / "entropy"
    on = cfg.system.interaction_on
    fields = cfg.driving(_driven(args))
    t_ref, series = None, None
    if cfg.solver in ("exact", "both"):
        psi0 = sc.ground_psi(cfg)
        run = sc.exact_run(cfg, psi0, cfg.system_spec(on), fields, sc.trajectory_starts(cfg, psi0)[:1])
        t_ref = run.entropy_times
        series = EntropySeries(t_ref, {"S_exact": run.entropy})
    if cfg.solver in ("tdqmc", "both"):
        for sigma in cfg.entropy.sigmas:
            gs = sc.tdqmc_ground_state(cfg, sigma)
            r = sc.tdqmc_run(cfg, gs.ensemble, cfg.system_spec(on), fields)
            label = f"S_tdqmc_{sigma:g}"
            if series is None:
                t_ref = r.times
                series = EntropySeries(t_ref, {label: r.entropy})
            else:
                series.add(label, np.interp(t_ref, r.times, r.entropy))
    path = io.emit_plot_data(series, out / "entropy.csv", cfg.force)
    _print({label: float(v[0]) for label, v in series.values.items()})
    print(f"wrote {path}")
    return EXIT_OK


def cmd_scenario(args) -> int:
    if args.name not in SCENARIOS:
        raise ConfigError(f"unknown scenario {args.name!r}; available: {', '.join(SCENARIOS)}")
    cfg = _config(args, args.name)
    report = sc.run_scenario(args.name, cfg)
    _print({"runtime_s": round(report.runtime, 2), **report.headline})
    for f in report.files:
        print(f"wrote {f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--seed", type=int, help="master seed (default 42)")
    common.add_argument("--out", help="output directory (env NONLOCALITY_OUT)")
    common.add_argument("--workers", type=int, help="worker threads")
    common.add_argument("--solver", choices=("exact", "tdqmc", "both"))
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key, e.g. tdqmc.M=200")
    common.add_argument("--force", action="store_true", help="overwrite existing CSV outputs")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="nonlocality", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("ground-exact", parents=[common], help="exact ground state by imaginary-time relaxation")
    sub.add_parser("ground-tdqmc", parents=[common], help="two-stage TDQMC ground state")
    sub.add_parser("sweep", parents=[common], help="sigma sweep and polynomial-fit minimum")
    for name, text in (("evolve", "driven run minus field-free companion"), ("entropy", "linear entropy along a driven run")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--driven", default="1", help="comma-separated driven electrons (default 1)")
    p = sub.add_parser("scenario", parents=[common], help="run a named experiment")
    p.add_argument("name", help=f"one of {', '.join(SCENARIOS)}")
    return parser


COMMANDS = {
    "ground-exact": cmd_ground_exact,
    "ground-tdqmc": cmd_ground_tdqmc,
    "sweep": cmd_sweep,
    "evolve": cmd_evolve,
    "entropy": cmd_entropy,
    "scenario": cmd_scenario,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
