"""Experiment configuration files (TOML).

A configuration looks like::

    [ensemble]
    count = 800
    range_meV = 15.0
    fwhm_meV = 7.5

    [[pulses]]
    center = 0.0
    duration = 2.5
    area_pi = 0.5        # pulse area in units of pi

    [time]
    t_start = -5.0
    t_end = 100.0
    dt = 0.01

    [model]
    variant = "BERG"
    m = 100             # trains m + 1 detunings; or give detuning_count
    omega_grid = [0.0, 1.0]
    seed = 0
    n_samples = 100

    [metrics]
    echo_window = [60.0, 100.0]

    [solver]
    method = "rk45"
    rtol = 1e-8
    atol = 1e-11

    [sweep]              # optional
    kind = "m"           # "range", "m" or "convergence"
    values = [5, 10, 50, 100, 500]
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tomli_w

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .integrate import SolverSettings, TimeGrid
from .metrics import DEFAULT_ECHO_WINDOW
from .physics import Pulse, PulseSequence, WeightDistribution, build_detuning_grid


class ConfigError(ValueError):
    pass


@dataclass
class EnsembleConfig:
    count: int = 800
    range_meV: float = 15.0
    fwhm_meV: float = 7.5


@dataclass
class PulseConfig:
    center: float
    duration: float
    area_pi: float

    def to_pulse(self) -> Pulse:
        return Pulse(self.center, self.duration, self.area_pi * np.pi)


def _default_pulses():
    return [PulseConfig(0.0, 2.5, 0.5), PulseConfig(40.0, 2.5, 1.0)]


@dataclass
class TimeConfig:
    t_start: float = -5.0
    t_end: float = 100.0
    dt: float = 0.01


@dataclass
class ModelConfig:
    variant: str = "BERG"
    m: int | None = 100
    detuning_count: int | None = None
    omega_grid: list[float] = field(default_factory=lambda: [0.0, 1.0])
    seed: int = 0
    n_samples: int = 100

    @property
    def training_count(self) -> int:
        """Number of trained detunings; ``m`` trains ``m + 1`` grid points."""
        if self.detuning_count is not None:
            return self.detuning_count
        if self.m is None:
            raise ConfigError("BERG needs model.m or model.detuning_count")
        return self.m + 1

    @property
    def omega_unit(self) -> float:
        return self.omega_grid[1]


@dataclass
class MetricsConfig:
    echo_window: list[float] = field(default_factory=lambda: list(DEFAULT_ECHO_WINDOW))


@dataclass
class SolverConfig:
    method: str = "rk45"
    rtol: float = 1e-8
    atol: float = 1e-11

    def settings(self) -> SolverSettings:
        return SolverSettings(self.method, self.rtol, self.atol)


@dataclass
class SweepConfig:
    kind: str = "m"
    values: list[float] = field(default_factory=list)


@dataclass
class ExperimentConfig:
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    pulses: list[PulseConfig] = field(default_factory=_default_pulses)
    time: TimeConfig = field(default_factory=TimeConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    sweep: SweepConfig | None = None

    def __post_init__(self):
        self.validate()

    def validate(self):
        e, t, m = self.ensemble, self.time, self.model
        if int(e.count) != e.count or e.count < 2:
            raise ConfigError(f"ensemble.count must be an integer >= 2, got {e.count}")
        if not e.range_meV > 0:
            raise ConfigError("ensemble.range_meV must be positive")
        if not e.fwhm_meV > 0:
            raise ConfigError("ensemble.fwhm_meV must be positive")
        for p in self.pulses:
            if not p.duration > 0:
                raise ConfigError(f"pulse duration must be positive, got {p.duration}")
        if not t.dt > 0 or not t.t_end > t.t_start:
            raise ConfigError("time grid needs dt > 0 and t_end > t_start")
        if not self.time_grid().uniform:
            raise ConfigError("time.dt must divide t_end - t_start")
        if m.variant not in ("BE", "BERG"):
            raise ConfigError(f"model.variant must be BE or BERG, got {m.variant!r}")
        if len(m.omega_grid) != 2 or m.omega_grid[0] != 0 or m.omega_grid[1] == 0:
            raise ConfigError("model.omega_grid must be [0, w] with w != 0")
        if m.variant == "BERG" and self.model.training_count < 2:
            raise ConfigError("BERG needs at least two training detunings")
        if m.n_samples < 5:
            raise ConfigError("model.n_samples must be at least the lifted dimension (5)")
        lo, hi = self.metrics.echo_window
        if not hi > lo:
            raise ConfigError("metrics.echo_window must be [lo, hi] with hi > lo")
        if hi < t.t_start or lo > t.t_end:
            raise ConfigError("metrics.echo_window lies outside the time grid")
        if self.solver.method not in ("rk45", "rk4"):
            raise ConfigError(f"solver.method must be rk45 or rk4, got {self.solver.method!r}")
        if not (self.solver.rtol > 0 and self.solver.atol > 0):
            raise ConfigError("solver tolerances must be positive")
        if self.sweep is not None and self.sweep.kind not in ("range", "m", "convergence"):
            raise ConfigError(f"unknown sweep kind {self.sweep.kind!r}")

    # builders -------------------------------------------------------------

    def pulse_sequence(self) -> PulseSequence:
        return PulseSequence(tuple(p.to_pulse() for p in self.pulses))

    def time_grid(self) -> TimeGrid:
        return TimeGrid(self.time.t_start, self.time.t_end, self.time.dt)

    def detuning_grid(self):
        return build_detuning_grid(self.ensemble.range_meV, self.ensemble.count)

    def training_detunings(self):
        return build_detuning_grid(self.ensemble.range_meV, self.model.training_count).values

    def weights(self) -> WeightDistribution:
        return WeightDistribution(self.ensemble.fwhm_meV)

    def replace(self, **sections) -> "ExperimentConfig":
        """Copy with whole sections or ``section__field`` values replaced."""
        data = self.to_dict()
        for key, value in sections.items():
            if "__" in key:
                sec, name = key.split("__", 1)
                data.setdefault(sec, {})[name] = value
            else:
                data[key] = value
        return from_dict(data)

    # serialization ----------------------------------------------------------

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        if out["sweep"] is None:
            del out["sweep"]
        # TOML has no null
        for key in ("m", "detuning_count"):
            if out["model"][key] is None:
                del out["model"][key]
        return out


_SECTIONS = {
    "ensemble": EnsembleConfig,
    "time": TimeConfig,
    "model": ModelConfig,
    "metrics": MetricsConfig,
    "solver": SolverConfig,
    "sweep": SweepConfig,
}


def _build(cls, data, where):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown keys in [{where}]: {', '.join(sorted(unknown))}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"[{where}]: {exc}") from None


def from_dict(data: dict) -> ExperimentConfig:
    unknown = set(data) - set(_SECTIONS) - {"pulses"}
    if unknown:
        raise ConfigError(f"unknown sections: {', '.join(sorted(unknown))}")
    kwargs = {}
    for name, cls in _SECTIONS.items():
        if name in data:
            section = dict(data[name])
            if name == "model" and "detuning_count" in section and "m" not in section:
                section["m"] = None
            kwargs[name] = _build(cls, section, name)
    if "pulses" in data:
        kwargs["pulses"] = [_build(PulseConfig, p, "pulses") for p in data["pulses"]]
    return ExperimentConfig(**kwargs)


def loads(text: str) -> ExperimentConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from None
    return from_dict(data)


def load(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return loads(text)


def dumps(cfg: ExperimentConfig) -> str:
    return tomli_w.dumps(cfg.to_dict())


def save(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(dumps(cfg))
