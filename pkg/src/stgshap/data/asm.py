"""Adaptive smoothing of gappy lane fields (Treiber-Helbing style).

Two kernel-weighted averages are formed over the observed bins, one with the
kernel sheared along the free-flow characteristic and one along the congested
characteristic. The speed of the congested estimate selects the blend.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import EmptyDataError, InvalidArgumentError
from ..tensor import TrafficTensor
from .rds import BinnedGrid

# caps the (outputs x observations) block held in memory at once
_BLOCK_ENTRIES = 2_000_000


@dataclass(frozen=True)
class AsmParams:
    c_free: float = 50.0  # mph, downstream
    c_cong: float = -10.0  # mph, upstream
    sigma: float = 0.4  # miles
    tau_smooth: float = 60.0  # seconds
    v_crit: float = 37.0  # mph
    delta_v: float = 12.0  # mph

    def __post_init__(self):
        if not self.c_free > 0 > self.c_cong:
            raise InvalidArgumentError("need c_free > 0 > c_cong")
        if min(self.sigma, self.tau_smooth, self.delta_v) <= 0:
            raise InvalidArgumentError("sigma, tau_smooth and delta_v must be positive")


def _kernel_average(x_out, t_out, x_obs, t_obs, vals, speed_mps, sigma, tau):
    """Normalised exponential-kernel average of ``vals`` at each output point.

    Log-weights are shifted per output row before exponentiation, so distant
    observations never underflow to an all-zero row.
    """
    out = np.empty((len(x_out), vals.shape[1]))
    block = max(1, _BLOCK_ENTRIES // max(len(x_obs), 1))
    for start in range(0, len(x_out), block):
        sl = slice(start, start + block)
        dx = x_out[sl, None] - x_obs[None, :]
        dt = t_out[sl, None] - t_obs[None, :]
        logw = -np.abs(dx - speed_mps * dt) / sigma - np.abs(dt) / tau
        logw -= logw.max(axis=1, keepdims=True)
        w = np.exp(logw)
        out[sl] = (w @ vals) / w.sum(axis=1, keepdims=True)
    return out


def asm_interpolate(grid: BinnedGrid, params: AsmParams | None = None, speed_feature: str = "speed"
                    ) -> TrafficTensor:
    p = params or AsmParams()
    try:
        f_speed = grid.feature_names.index(speed_feature)
    except ValueError:
        raise InvalidArgumentError(f"grid has no {speed_feature!r} feature") from None
    n_cells, n_steps = grid.num_cells, grid.values.shape[1]
    observed = grid.counts > 0
    empty = [lane for lane in range(grid.num_lanes)
             if not observed[lane * n_cells:(lane + 1) * n_cells].any()]
    if empty:
        raise EmptyDataError(f"lanes without any observation: {', '.join(str(l + 1) for l in empty)}")

    cc, ss = np.meshgrid(np.arange(n_cells), np.arange(n_steps), indexing="ij")
    x_all = ((cc + 0.5) * grid.cell_miles).ravel()
    t_all = ((ss + 0.5) * grid.dt_seconds).ravel()
    c_free, c_cong = p.c_free / 3600.0, p.c_cong / 3600.0
    out = np.empty_like(grid.values)
    for lane in range(grid.num_lanes):
        rows = slice(lane * n_cells, (lane + 1) * n_cells)
        obs = observed[rows].ravel()
        vals = grid.values[rows].reshape(-1, grid.values.shape[2])[obs]
        free = _kernel_average(x_all, t_all, x_all[obs], t_all[obs], vals, c_free, p.sigma, p.tau_smooth)
        cong = _kernel_average(x_all, t_all, x_all[obs], t_all[obs], vals, c_cong, p.sigma, p.tau_smooth)
        w = 0.5 * (1.0 + np.tanh((p.v_crit - cong[:, f_speed]) / p.delta_v))
        blended = w[:, None] * cong + (1.0 - w[:, None]) * free
        out[rows] = np.clip(blended, 0.0, None).reshape(n_cells, n_steps, -1)
    return TrafficTensor(out, grid.num_lanes, grid.num_cells, grid.feature_names, grid.dt_seconds, grid.cell_miles)


def grid_from_tensor(tensor: TrafficTensor, observed: np.ndarray | None = None) -> BinnedGrid:
    """Wrap a complete tensor as a binned grid, optionally hiding unobserved bins."""
    obs = np.ones(tensor.values.shape[:2], dtype=bool) if observed is None else np.asarray(observed, dtype=bool)
    values = tensor.values.copy()
    values[~obs] = np.nan
    return BinnedGrid(values, obs.astype(np.int64), np.zeros(obs.shape), tensor.num_lanes, tensor.num_cells,
                      tensor.feature_names, tensor.dt_seconds, tensor.cell_miles)
