"""Simulation configuration: dataclasses, TOML loading and validation."""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field

from .errors import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

METHODS = ("pfm", "apic_midpoint", "euler_sl", "direct_hfmc")
BACKENDS = ("none", "mpm", "ibm")

# method -> allowed backends
COMPATIBLE = {
    "pfm": ("none", "mpm", "ibm"),
    "apic_midpoint": ("none", "mpm", "ibm"),
    "euler_sl": ("none", "ibm"),
    "direct_hfmc": ("mpm",),
}


@dataclass
class ForcesConfig:
    """Explicit overrides; ``None`` keeps the scenario's own value."""

    gravity: tuple = None
    viscosity: float = None
    buoyancy: tuple = None   # uniform body acceleration on fluid only


@dataclass
class OutputConfig:
    directory: str = "out"
    stride: int = 1
    dump_grids: bool = False
    images: bool = True
    vort_max: float = None
    particles: bool = False


@dataclass
class SimConfig:
    scenario: str = "taylor_green"
    nx: int = None                  # None: the scenario's resolution
    ny: int = None
    dx: float = None                # None: 1 / min(nx, ny), the short side has unit length
    cfl: float = 0.5
    n_reinit: int = 20
    n_reinit_narrowband: int = 2
    particles_per_cell: int = 16
    method: str = "pfm"
    backend: str = None             # defaults to the scenario's backend
    frames: int = 10
    seed: int = 0
    dt_min: float = 1e-5
    dt_max: float = 1.0 / 24.0
    fixed_dt: float = None
    kinetic_velocity: str = "mid"   # field behind grad 1/2 |u|^2: "mid" or "previous"
    solver_rtol: float = 1e-6
    solver_maxiter: int = 1000
    solid_ppc: int = 4
    solid_cfl_sound: float = 0.3
    solid_cfl_velocity: float = 0.5
    ibm_dt: float = 5e-4
    ibm_iterations: int = 50
    ibm_forcing_iterations: int = 4
    forces: ForcesConfig = field(default_factory=ForcesConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    scene: dict = field(default_factory=dict)

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)


def _check(cond, path, msg):
    if not cond:
        raise ConfigError(path, msg)


def validate(cfg: SimConfig, scenarios=None) -> SimConfig:
    from .scenarios import CATALOG
    scenarios = CATALOG if scenarios is None else scenarios
    _check(cfg.scenario in scenarios, "scenario",
           f"unknown scenario {cfg.scenario!r} (known: {', '.join(sorted(scenarios))})")
    spec = scenarios[cfg.scenario]
    if cfg.backend is None:
        cfg.backend = spec.backend
    if cfg.nx is None:
        cfg.nx = spec.nx
    if cfg.ny is None:
        cfg.ny = spec.ny
    if cfg.dx is None and isinstance(cfg.nx, int) and isinstance(cfg.ny, int) and min(cfg.nx, cfg.ny) > 0:
        cfg.dx = 1.0 / min(cfg.nx, cfg.ny)
    _check(cfg.method in METHODS, "method", f"unknown method {cfg.method!r}")
    _check(cfg.backend in BACKENDS, "backend", f"unknown backend {cfg.backend!r}")
    _check(cfg.backend in COMPATIBLE[cfg.method], "method",
           f"method {cfg.method!r} does not support backend {cfg.backend!r}")
    _check(spec.backend == cfg.backend or spec.backend == "none", "backend",
           f"scenario {cfg.scenario!r} needs backend {spec.backend!r}")
    _check(isinstance(cfg.nx, int) and cfg.nx >= 8, "nx", "must be an integer >= 8")
    _check(isinstance(cfg.ny, int) and cfg.ny >= 8, "ny", "must be an integer >= 8")
    _check(cfg.dx is not None and cfg.dx > 0, "dx", "must be positive")
    _check(cfg.kinetic_velocity in ("mid", "previous"), "kinetic_velocity", "must be 'mid' or 'previous'")
    _check(0.0 < cfg.cfl <= 1.0, "cfl", "must lie in (0, 1]")
    _check(cfg.n_reinit >= 1, "n_reinit", "must be >= 1")
    _check(cfg.n_reinit_narrowband >= 1, "n_reinit_narrowband", "must be >= 1")
    _check(cfg.particles_per_cell >= 4, "particles_per_cell", "must be >= 4")
    _check(cfg.frames >= 0, "frames", "must be >= 0")
    _check(0 < cfg.dt_min <= cfg.dt_max, "dt_min", "need 0 < dt_min <= dt_max")
    _check(cfg.output.stride >= 1, "output.stride", "must be >= 1")
    _check(cfg.forces.viscosity is None or cfg.forces.viscosity >= 0, "forces.viscosity", "must be >= 0")
    for name in ("gravity", "buoyancy"):
        vec = getattr(cfg.forces, name)
        _check(vec is None or len(vec) == 2, f"forces.{name}", "must have two components")
    unknown = set(cfg.scene) - set(spec.defaults)
    _check(not unknown, f"scene.{sorted(unknown)[0] if unknown else ''}",
           f"unknown parameter for scenario {cfg.scenario!r}")
    return cfg


def _build(cls, data, prefix):
    names = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        path = f"{prefix}{key}"
        if key not in names:
            raise ConfigError(path, "unknown field")
        if key == "forces":
            value = _build(ForcesConfig, value, "forces.")
        elif key == "output":
            value = _build(OutputConfig, value, "output.")
        elif key in ("gravity", "buoyancy"):
            value = tuple(float(v) for v in value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(prefix.rstrip(".") or "config", str(exc)) from None


def config_from_dict(data: dict) -> SimConfig:
    data = dict(data)
    if "simulation" in data:
        sim = dict(data.pop("simulation"))
        sim.update(data)
        data = sim
    cfg = _build(SimConfig, data, "")
    return validate(cfg)


def load_config(path) -> SimConfig:
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("config", f"{path}: {exc}") from None
    return config_from_dict(data)
