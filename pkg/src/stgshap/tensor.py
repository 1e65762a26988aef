from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, InvalidDimensionError

DEFAULT_FEATURES = ("flow", "density", "speed")


@dataclass(frozen=True)
class TrafficTensor:
    """Macroscopic measurements indexed ``(node, time step, feature)``.

    Units: flow in veh/h, density in veh/mile, speed in mph.
    """

    values: np.ndarray = field(repr=False)
    num_lanes: int
    num_cells: int
    feature_names: tuple[str, ...] = DEFAULT_FEATURES
    dt_seconds: float = 10.0
    cell_miles: float = 0.1

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 3:
            raise InvalidDimensionError(f"traffic tensor must be 3-D, got shape {values.shape}")
        if values.shape[0] != self.num_lanes * self.num_cells:
            raise InvalidDimensionError(
                f"{values.shape[0]} nodes but grid is {self.num_lanes}x{self.num_cells}")
        if values.shape[2] != len(self.feature_names):
            raise InvalidDimensionError(
                f"{values.shape[2]} features but {len(self.feature_names)} names")
        if not np.all(np.isfinite(values)):
            raise DataError("traffic tensor contains NaN or infinite entries")
        if np.any(values < 0):
            raise DataError("traffic tensor contains negative entries")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))

    @property
    def num_nodes(self) -> int:
        return self.values.shape[0]

    @property
    def num_steps(self) -> int:
        return self.values.shape[1]

    def feature_index(self, name: str | int) -> int:
        if isinstance(name, (int, np.integer)):
            if not 0 <= name < len(self.feature_names):
                raise DataError(f"feature index {name} out of range")
            return int(name)
        try:
            return self.feature_names.index(name)
        except ValueError:
            raise DataError(f"unknown feature {name!r}; have {self.feature_names}") from None

    def window(self, end: int, length: int) -> np.ndarray:
        """Steps ``end - length + 1 .. end`` inclusive, shape ``(N, length, F)``."""
        start = end - length + 1
        if start < 0 or end >= self.num_steps:
            raise InvalidDimensionError(f"window [{start}, {end}] outside [0, {self.num_steps})")
        return self.values[:, start:end + 1, :]

    def lane_field(self, feature: str | int) -> np.ndarray:
        """Shape ``(num_lanes, num_cells, T)`` view of one feature."""
        f = self.feature_index(feature)
        return self.values[:, :, f].reshape(self.num_lanes, self.num_cells, self.num_steps)
