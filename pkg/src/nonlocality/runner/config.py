"""Run configuration: YAML file + CLI overrides, validated into frozen dataclasses.

Precedence (lowest to highest): built-in defaults, NONLOCALITY_OUT (output
directory only), config file, CLI flags.
Unknown keys anywhere in the tree are rejected with their dotted path.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from dataclasses import field as _field
from pathlib import Path

import yaml

from ..model import ConfigError, ElectronField, FieldSpec, Grid1D, Grid2D, SystemSpec

SCENARIOS = ("fig1a", "fig1bc", "fig2", "fig3")
SOLVERS = ("exact", "tdqmc", "both")
OUTPUT_ENV = "NONLOCALITY_OUT"


@dataclass(frozen=True)
class SystemConfig:
    confinement_strength: float = 0.5
    softcore_a: float = 1.0
    interaction_on: bool = True


@dataclass(frozen=True)
class GridConfig:
    n_points: int = 256
    span: float = 20.0


@dataclass(frozen=True)
class FieldConfig:
    amplitude: float = 15.0
    omega: float = 5.0
    phase: float = 0.0
    t_on: float = 0.0


@dataclass(frozen=True)
class ExactConfig:
    width: float = 1.0
    dtau: float = 0.002
    energy_tol: float = 1e-10
    max_steps: int = 50_000
    dt: float = 0.001
    snapshot_stride: int = 10
    n_trajectories: int = 4
    n_statistics_trajectories: int = 400


@dataclass(frozen=True)
class TdqmcConfig:
    M: int = 1000
    sigma: float = 0.82
    width: float = 1.0
    dtau: float = 0.01
    diffusion: float = 0.5
    include_drift: bool = True
    stage1_steps: int = 1000
    stage2_tol: float = 1e-7
    stage2_max_steps: int = 4000
    dt: float = 0.005
    record_stride: int = 10


@dataclass(frozen=True)
class EvolveConfig:
    duration: float = 6.0


@dataclass(frozen=True)
class SweepConfig:
    sigmas: tuple = (0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0, 1.1, 1.2, 1.3, 1.4)
    degree: int = 4
    common_random_numbers: bool = True


@dataclass(frozen=True)
class EntropyConfig:
    sigmas: tuple = (0.7, 0.82, 1.0)


@dataclass(frozen=True)
class RunConfig:
    scenario: str = "fig2"
    solver: str = "both"
    seed: int = 42
    out: str = "results"
    workers: int = 1
    force: bool = False
    system: SystemConfig = _field(default_factory=SystemConfig)
    grid: GridConfig = _field(default_factory=GridConfig)
    field: FieldConfig = _field(default_factory=FieldConfig)
    exact: ExactConfig = _field(default_factory=ExactConfig)
    tdqmc: TdqmcConfig = _field(default_factory=TdqmcConfig)
    evolve: EvolveConfig = _field(default_factory=EvolveConfig)
    sweep: SweepConfig = _field(default_factory=SweepConfig)
    entropy: EntropyConfig = _field(default_factory=EntropyConfig)

    # -- derived objects ----------------------------------------------------

    def system_spec(self, interaction_on: bool | None = None) -> SystemSpec:
        s = self.system
        on = s.interaction_on if interaction_on is None else interaction_on
        return SystemSpec(2, s.confinement_strength, s.softcore_a, on)

    def grid1d(self) -> Grid1D:
        return Grid1D(self.grid.n_points, self.grid.span)

    def grid2d(self) -> Grid2D:
        g = self.grid1d()
        return Grid2D(g, g)

    def driving(self, driven=(1,)) -> FieldSpec:
        f = self.field
        return FieldSpec(
            tuple(
                ElectronField(f.amplitude if i in driven else 0.0, f.omega, f.phase, f.t_on) for i in (1, 2)
            )
        )

    def to_dict(self) -> dict:
        return _to_plain(dataclasses.asdict(self))


def _to_plain(obj):
    if isinstance(obj, dict):
        return {k: _to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj


def _coerce(value, default, path: str):
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{path}: expected true/false, got {value!r}")
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, str):
            try:
                value = float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return tuple(_coerce(v, 0.0, f"{path}[{i}]") for i, v in enumerate(value))
    raise ConfigError(f"{path}: unsupported value {value!r}")


def _build(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or '<root>'}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigError(f"unknown key {where}{unknown[0]} (allowed: {', '.join(sorted(known))})")
    defaults = cls()
    kwargs = {}
    for name, value in data.items():
        sub = f"{path}.{name}" if path else name
        default = getattr(defaults, name)
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, sub)
        else:
            kwargs[name] = _coerce(value, default, sub)
    return cls(**kwargs)


def _positive(path: str, value) -> None:
    if not value > 0:
        raise ConfigError(f"{path}: must be positive, got {value!r}")


def validate(cfg: RunConfig) -> RunConfig:
    if cfg.scenario not in SCENARIOS:
        raise ConfigError(f"scenario: unknown scenario {cfg.scenario!r}; available: {', '.join(SCENARIOS)}")
    if cfg.solver not in SOLVERS:
        raise ConfigError(f"solver: must be one of {', '.join(SOLVERS)}")
    if cfg.workers < 1:
        raise ConfigError("workers: must be >= 1")
    for key in ("confinement_strength", "softcore_a"):
        _positive(f"system.{key}", getattr(cfg.system, key))
    n = cfg.grid.n_points
    if n < 8 or n & (n - 1):
        raise ConfigError(f"grid.n_points: must be a power of two >= 8, got {n}")
    _positive("grid.span", cfg.grid.span)
    if cfg.field.omega < 0:
        raise ConfigError("field.omega: must be >= 0")
    for key in ("width", "dtau", "energy_tol", "dt", "max_steps", "snapshot_stride", "n_trajectories"):
        _positive(f"exact.{key}", getattr(cfg.exact, key))
    for key in ("M", "sigma", "width", "dtau", "diffusion", "stage2_tol", "dt", "stage2_max_steps", "record_stride"):
        _positive(f"tdqmc.{key}", getattr(cfg.tdqmc, key))
    if cfg.tdqmc.stage1_steps < 0:
        raise ConfigError("tdqmc.stage1_steps: must be >= 0")
    _positive("evolve.duration", cfg.evolve.duration)
    for i, s in enumerate(cfg.sweep.sigmas):
        _positive(f"sweep.sigmas[{i}]", s)
    if len(set(cfg.sweep.sigmas)) != len(cfg.sweep.sigmas):
        raise ConfigError("sweep.sigmas: values must be distinct")
    if cfg.sweep.degree < 1:
        raise ConfigError("sweep.degree: must be >= 1")
    for i, s in enumerate(cfg.entropy.sigmas):
        _positive(f"entropy.sigmas[{i}]", s)
    return cfg


def from_dict(data: dict | None) -> RunConfig:
    return validate(_build(RunConfig, data or {}, ""))


def _set_dotted(tree: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = tree
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{dotted}: {p} is not a section")
    node[parts[-1]] = value


def _parse_scalar(text: str):
    value = yaml.safe_load(text)
    if isinstance(value, str):
        # YAML 1.1 reads "1e-8" as a string
        try:
            return float(value)
        except ValueError:
            pass
    return value


def parse_config(path=None, overrides: dict | None = None, env=None) -> RunConfig:
    """Load ``path`` (YAML; may be None), apply dotted-key ``overrides``, validate.

    ``overrides`` values may be strings, which are parsed as YAML scalars so
    that ``--set tdqmc.M=200`` works.  The output directory falls back to the
    ``NONLOCALITY_OUT`` environment variable when neither file nor flags set it.
    """
    data: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        loaded = yaml.safe_load(p.read_text())
        if loaded is not None and not isinstance(loaded, dict):
            raise ConfigError(f"{p}: top level must be a mapping")
        data = loaded or {}
    env = os.environ if env is None else env
    if "out" not in data and env.get(OUTPUT_ENV):
        data["out"] = env[OUTPUT_ENV]
    for key, value in (overrides or {}).items():
        if isinstance(value, str):
            value = _parse_scalar(value)
        _set_dotted(data, key, value)
    return from_dict(data)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


def save_config(cfg: RunConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_config(cfg))
    return path
