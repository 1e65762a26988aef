"""Run configuration: one JSON document per run, validated before any work starts."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

from .data.asm import AsmParams
from .data.synth import SynthParams
from .errors import ConfigError, StgshapError
from .predictor import Hyper
from .training import TrainConfig


@dataclass
class GridConfig:
    num_lanes: int = 4
    num_cells: int | None = 30
    num_steps: int = 360
    cell_miles: float = 0.1
    dt_seconds: float = 10.0
    lateral_edges: bool = True
    # ingestion extent; the time range defaults to the span of the data
    milepost_start: float | None = None
    milepost_end: float | None = None
    milepost_increasing: bool = True
    time_start: float | None = None
    time_end: float | None = None
    record_seconds: float = 30.0
    vehicles_per_mile_full: float = 211.0


@dataclass
class PredictorConfig:
    cheb_order: int = 3
    kernel_width: int = 3
    hidden: int = 16
    window: int = 12
    horizon: int = 1
    learning_rate: float = 3e-3
    epochs: int = 30
    batch: int = 32
    seed: int = 0
    precision: int = 32
    optimizer: str = "adam"
    val_fraction: float = 0.2

    def hyper(self, num_features: int = 3) -> Hyper:
        return Hyper(self.cheb_order, self.kernel_width, self.hidden, self.window, self.horizon, num_features)

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.learning_rate, self.epochs, self.batch, self.seed, self.precision, self.optimizer)


@dataclass
class TargetConfig:
    lane: int | None = 1
    cell: int | None = 19
    node: int | None = None
    feature: str | int = "speed"
    step: int = 0
    window_end: int | None = 122


@dataclass
class ExplainerConfig:
    n_samples: int | None = None
    seed: int = 0
    baseline: str = "zero"
    target: TargetConfig = field(default_factory=TargetConfig)
    # spatial players: nodes within this many hops (default: Chebyshev receptive field)
    hops: int | None = None
    temporal_steps: int | None = None
    top_k: int = 3
    oracle_hops: int = 1
    oracle_temporal_steps: int = 4


@dataclass
class TriggerConfig:
    lane: int = 1
    cell: int = 20
    step: int = 120


@dataclass
class SynthConfig:
    seed: int = 0
    trigger: TriggerConfig = field(default_factory=TriggerConfig)
    noise_speed: float = 0.3
    noise_relative: float = 0.01


@dataclass
class PathsConfig:
    input_csv: str | None = None
    output_dir: str = "out"


@dataclass
class RunConfig:
    grid: GridConfig = field(default_factory=GridConfig)
    predictor: PredictorConfig = field(default_factory=PredictorConfig)
    explainer: ExplainerConfig = field(default_factory=ExplainerConfig)
    asm: dict = field(default_factory=dict)
    synth: SynthConfig = field(default_factory=SynthConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def asm_params(self) -> AsmParams:
        return AsmParams(**self.asm)

    def synth_params(self) -> SynthParams:
        return SynthParams(noise_speed=self.synth.noise_speed, noise_relative=self.synth.noise_relative,
                           dt_seconds=self.grid.dt_seconds, cell_miles=self.grid.cell_miles)

    def validate(self) -> "RunConfig":
        g, e = self.grid, self.explainer
        try:
            self.predictor.hyper()
            self.predictor.train_config()
            self.asm_params()
            self.synth_params()
        except (StgshapError, TypeError) as exc:
            raise ConfigError(f"invalid configuration: {exc}") from exc
        if g.num_lanes < 1 or (g.num_cells is not None and g.num_cells < 1) or g.num_steps < 1:
            raise ConfigError("grid dimensions must be positive")
        if g.cell_miles <= 0 or g.dt_seconds <= 0 or g.record_seconds <= 0:
            raise ConfigError("grid widths must be positive")
        if not 0 <= self.predictor.val_fraction < 1:
            raise ConfigError("predictor.val_fraction must be in [0, 1)")
        if e.baseline not in ("zero", "mean"):
            raise ConfigError(f"explainer.baseline must be 'zero' or 'mean', got {e.baseline!r}")
        if e.n_samples is not None and e.n_samples < 2:
            raise ConfigError("explainer.n_samples must be at least 2")
        if e.top_k < 0 or (e.hops is not None and e.hops < 0) or e.oracle_hops < 0:
            raise ConfigError("explainer counts must be non-negative")
        w = self.predictor.window
        for name, steps in (("temporal_steps", e.temporal_steps), ("oracle_temporal_steps", e.oracle_temporal_steps)):
            if steps is not None and not 0 <= steps <= w:
                raise ConfigError(f"explainer.{name} must be in [0, {w}]")
        t = e.target
        if t.node is None and (t.lane is None or t.cell is None):
            raise ConfigError("explainer.target needs either node or lane and cell")
        if not 0 <= t.step < self.predictor.horizon:
            raise ConfigError("explainer.target.step outside the forecast horizon")
        if t.window_end is not None and t.window_end < w - 1:
            raise ConfigError(f"explainer.target.window_end must be at least {w - 1}")
        return self


def _build(cls, data: Any, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be an object")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(sorted(unknown))}")
    kwargs = {}
    for name, value in data.items():
        default = known[name].default_factory() if callable(known[name].default_factory) else None
        if is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}.{name}".lstrip("."))
        else:
            kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "")


def parse_override(item: str) -> tuple[list[str], Any]:
    if "=" not in item:
        raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    for item in overrides:
        path, value = parse_override(item)
        node = data
        for key in path[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot set {'.'.join(path)}: {key} is not an object")
        node[path[-1]] = value
    return data


def load_config(path: str | Path | None, overrides: list[str] = ()) -> RunConfig:
    data: dict = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    data = apply_overrides(data, list(overrides))
    return config_from_dict(data).validate()
