"""Radar detector (RDS) CSV ingestion and binning onto the lane-cell grid."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import EmptyDataError, InvalidArgumentError, SchemaError, StorageError
from ..tensor import DEFAULT_FEATURES

RDS_COLUMNS = ("timestamp", "milepost", "lane", "speed", "volume", "occupancy")


@dataclass(frozen=True)
class RawMeasurement:
    timestamp: float
    milepost: float
    lane: int
    speed: float
    volume: float
    occupancy: float

    def is_valid(self) -> bool:
        nums = (self.timestamp, self.milepost, self.speed, self.volume, self.occupancy)
        return (all(math.isfinite(v) for v in nums) and self.lane >= 1 and self.speed >= 0
                and self.volume >= 0 and 0 <= self.occupancy <= 1)


@dataclass
class RdsLoad:
    records: list[RawMeasurement]
    rows_read: int
    dropped: int
    dropped_lines: list[int] = field(default_factory=list)


def load_rds_csv(path: str | Path) -> RdsLoad:
    """Parse ``timestamp,milepost,lane,speed,volume,occupancy`` rows.

    Rows that fail to parse or violate the measurement invariants are dropped
    and counted (with their line numbers).
    """
    path = Path(path)
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise StorageError(f"cannot open {path}: {exc}") from exc
    records, dropped_lines, rows = [], [], 0
    with fh:
        reader = csv.DictReader(fh)
        header = [h.strip() for h in (reader.fieldnames or [])]
        missing = [c for c in RDS_COLUMNS if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing column {missing[0]!r}")
        reader.fieldnames = header
        for row in reader:
            rows += 1
            try:
                lane = float(row["lane"])
                rec = RawMeasurement(float(row["timestamp"]), float(row["milepost"]), int(lane),
                                     float(row["speed"]), float(row["volume"]), float(row["occupancy"]))
                ok = lane == int(lane) and rec.is_valid()
            except (TypeError, ValueError):
                ok = False
            if ok:
                records.append(rec)
            else:
                dropped_lines.append(reader.line_num)
    if not records:
        raise EmptyDataError(f"{path}: no valid measurements ({rows} rows read)")
    return RdsLoad(records, rows, len(dropped_lines), dropped_lines)


@dataclass(frozen=True)
class GridExtent:
    """Road segment and time span to bin; cells grow downstream."""

    milepost_start: float
    milepost_end: float
    time_start: float
    time_end: float
    num_lanes: int
    # set False when mileposts decrease in the direction of travel
    milepost_increasing: bool = True

    def num_cells(self, cell_miles: float) -> int:
        return _count(abs(self.milepost_end - self.milepost_start), cell_miles)

    def num_steps(self, dt_seconds: float) -> int:
        return _count(self.time_end - self.time_start, dt_seconds)


def _count(span: float, width: float) -> int:
    if not span > 0 or not width > 0:
        raise InvalidArgumentError(f"empty extent (span {span}, width {width})")
    ratio = span / width
    # tolerate float noise such as 17.1 / 0.1 = 171.00000000000003
    near = round(ratio)
    return int(near) if abs(ratio - near) < 1e-6 else int(math.ceil(ratio))


@dataclass
class BinnedGrid:
    """Per-bin averages with gaps; ``values`` is NaN where ``counts == 0``."""

    values: np.ndarray
    counts: np.ndarray
    volume_sum: np.ndarray
    num_lanes: int
    num_cells: int
    feature_names: tuple[str, ...] = DEFAULT_FEATURES
    dt_seconds: float = 10.0
    cell_miles: float = 0.1

    @property
    def observed(self) -> np.ndarray:
        return self.counts > 0

    @property
    def num_nodes(self) -> int:
        return self.num_lanes * self.num_cells


def bin_to_grid(records: list[RawMeasurement], extent: GridExtent, cell_miles: float = 0.1,
                dt_seconds: float = 10.0, record_seconds: float = 30.0,
                vehicles_per_mile_full: float = 211.0, min_speed: float = 1.0) -> BinnedGrid:
    """Average records per (lane, cell, time bin).

    Flow is the mean count scaled to vehicles/hour. Density is flow/speed, or
    occupancy times ``vehicles_per_mile_full`` when speed is at or below
    ``min_speed``. Bins without records are left as gaps.
    """
    n_cells = extent.num_cells(cell_miles)
    n_steps = extent.num_steps(dt_seconds)
    lanes = extent.num_lanes
    n_nodes = lanes * n_cells
    if lanes < 1:
        raise InvalidArgumentError("extent needs at least one lane")

    arr = np.array([(r.timestamp, r.milepost, r.lane, r.speed, r.volume, r.occupancy) for r in records],
                   dtype=np.float64).reshape(-1, 6)
    ts, mp, lane, speed, volume, occ = arr.T
    offset = (mp - extent.milepost_start) if extent.milepost_increasing else (extent.milepost_start - mp)
    span = abs(extent.milepost_end - extent.milepost_start)
    inside = ((offset >= 0) & (offset <= span) & (ts >= extent.time_start) & (ts < extent.time_end)
              & (lane >= 1) & (lane <= lanes))
    if not inside.any():
        raise EmptyDataError("no measurements inside the requested extent")
    cell = np.minimum((offset[inside] / cell_miles + 1e-9).astype(np.int64), n_cells - 1)
    step = np.minimum(((ts[inside] - extent.time_start) / dt_seconds).astype(np.int64), n_steps - 1)
    node = (lane[inside].astype(np.int64) - 1) * n_cells + cell
    flat = node * n_steps + step

    size = n_nodes * n_steps
    counts = np.bincount(flat, minlength=size)
    vol_sum = np.bincount(flat, weights=volume[inside], minlength=size)
    spd_sum = np.bincount(flat, weights=speed[inside], minlength=size)
    occ_sum = np.bincount(flat, weights=occ[inside], minlength=size)

    with np.errstate(invalid="ignore", divide="ignore"):
        mean_speed = spd_sum / counts
        flow = vol_sum / counts * (3600.0 / record_seconds)
        mean_occ = occ_sum / counts
        density = np.where(mean_speed > min_speed, flow / mean_speed, mean_occ * vehicles_per_mile_full)
    values = np.stack([flow, density, mean_speed], axis=-1)
    values[counts == 0] = np.nan
    shape = (n_nodes, n_steps)
    return BinnedGrid(values.reshape(shape + (3,)), counts.reshape(shape), vol_sum.reshape(shape),
                      lanes, n_cells, DEFAULT_FEATURES, dt_seconds, cell_miles)
