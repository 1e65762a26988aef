"""Synthetic traffic breakdown fixtures with known trigger location.

Free flow carries a density wave moving downstream at the lane's free-flow
speed. At the trigger, speed drops to ``v_min`` and the jam front travels
upstream at ``wave_speed_mph``; each cell recovers exponentially after the
front passes and the drop decays with distance, so the jam dissipates.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..errors import InvalidArgumentError
from ..tensor import DEFAULT_FEATURES, TrafficTensor


@dataclass(frozen=True)
class SynthParams:
    v_free: float = 65.0
    lane_speed_step: float = 3.0
    v_min: float = 15.0
    wave_speed_mph: float = -12.0
    recovery_seconds: float = 120.0
    decay_miles: float = 1.5
    lateral_spill: float = 0.35
    k_free: float = 25.0
    k_jam: float = 160.0
    demand_amplitude: float = 0.2
    demand_period_seconds: float = 300.0
    noise_speed: float = 0.3
    noise_relative: float = 0.01
    dt_seconds: float = 10.0
    cell_miles: float = 0.1

    def __post_init__(self):
        if not self.wave_speed_mph < 0:
            raise InvalidArgumentError("wave_speed_mph must be negative (upstream)")
        if not 0 <= self.v_min < self.v_free:
            raise InvalidArgumentError("need 0 <= v_min < v_free")
        if self.recovery_seconds <= 0 or self.decay_miles <= 0:
            raise InvalidArgumentError("recovery_seconds and decay_miles must be positive")
        if self.noise_speed < 0 or self.noise_relative < 0:
            raise InvalidArgumentError("noise amplitudes must be non-negative")


@dataclass(frozen=True)
class TriggerRecord:
    lane: int
    cell: int
    step: int
    node: int
    wave_speed_mph: float
    steps_per_cell: float

    def arrival_step(self, cell: int) -> float:
        """Step at which the jam front reaches ``cell`` (only cells at or upstream of the trigger)."""
        return self.step + (self.cell - cell) * self.steps_per_cell

    def to_dict(self) -> dict:
        return asdict(self)


def lane_free_speeds(num_lanes: int, p: SynthParams) -> np.ndarray:
    return p.v_free + p.lane_speed_step * (num_lanes - 1 - np.arange(num_lanes)) / max(num_lanes - 1, 1)


def breakdown_depth(num_lanes: int, num_cells: int, num_steps: int, trigger: TriggerRecord,
                    p: SynthParams) -> np.ndarray:
    """Relative speed drop in ``[0, 1]``, shape ``(num_lanes, num_cells, num_steps)``."""
    cells = np.arange(num_cells)[:, None]
    steps = np.arange(num_steps)[None, :]
    upstream = cells <= trigger.cell
    arrival = trigger.step + (trigger.cell - cells) * trigger.steps_per_cell
    since = (steps - arrival) * p.dt_seconds
    hit = upstream & (since >= 0)
    depth = np.where(
        hit,
        np.exp(-(trigger.cell - cells) * p.cell_miles / p.decay_miles) * np.exp(-np.where(hit, since, 0) / p.recovery_seconds),
        0.0)
    lanes = np.abs(np.arange(num_lanes) - trigger.lane)
    return (p.lateral_spill ** lanes)[:, None, None] * depth[None]


def synth_breakdown(num_lanes: int, num_cells: int, num_steps: int, seed: int,
                    trigger: tuple[int, int, int], params: SynthParams | None = None
                    ) -> tuple[TrafficTensor, TriggerRecord]:
    p = params or SynthParams()
    lane, cell, step = trigger
    if num_steps < 20:
        raise InvalidArgumentError("need at least 20 time steps")
    if not (0 <= lane < num_lanes and 0 <= cell < num_cells and 0 <= step < num_steps):
        raise InvalidArgumentError(f"trigger {trigger} outside {num_lanes}x{num_cells}x{num_steps} grid")
    steps_per_cell = p.cell_miles / (abs(p.wave_speed_mph) / 3600.0) / p.dt_seconds
    rec = TriggerRecord(lane, cell, step, lane * num_cells + cell, p.wave_speed_mph, steps_per_cell)

    v_lane = lane_free_speeds(num_lanes, p)[:, None, None]
    x = (np.arange(num_cells) + 0.5)[None, :, None] * p.cell_miles
    t = (np.arange(num_steps) + 0.5)[None, None, :] * p.dt_seconds
    phase = 2 * np.pi * (t - x / (v_lane / 3600.0)) / p.demand_period_seconds
    phase = phase + 0.7 * np.arange(num_lanes)[:, None, None]
    k_free = p.k_free * (1.0 + p.demand_amplitude * np.sin(phase))

    depth = breakdown_depth(num_lanes, num_cells, num_steps, rec, p)
    speed = v_lane - (v_lane - p.v_min) * depth
    density = k_free + (p.k_jam - k_free) * depth
    flow = density * speed

    rng = np.random.default_rng(seed)
    if p.noise_speed > 0:
        speed = speed + rng.normal(0.0, p.noise_speed, speed.shape)
    if p.noise_relative > 0:
        flow = flow * (1.0 + rng.normal(0.0, p.noise_relative, flow.shape))
        density = density * (1.0 + rng.normal(0.0, p.noise_relative, density.shape))
    fields = [np.clip(a, 0.0, None) for a in (flow, density, speed)]
    values = np.stack([f.reshape(num_lanes * num_cells, num_steps) for f in fields], axis=-1)
    tensor = TrafficTensor(values, num_lanes, num_cells, DEFAULT_FEATURES, p.dt_seconds, p.cell_miles)
    return tensor, rec
