"""Coalitions of spatial/temporal players and the masked what-if inputs they induce."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidArgumentError, InvalidDimensionError, StorageError, TooLargeError

ENUMERATION_LIMIT = 22


@dataclass(frozen=True)
class PlayerMap:
    """Which nodes and time steps of a window are players.

    Spatial players are node indices (never the explained node); temporal
    players are time indices within the window. Nodes outside the spatial
    player list stay present but still follow temporal masking; the explained
    node's row is never masked.
    """

    explained_node: int
    spatial_players: tuple[int, ...]
    temporal_players: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "spatial_players", tuple(int(i) for i in self.spatial_players))
        object.__setattr__(self, "temporal_players", tuple(int(t) for t in self.temporal_players))
        if self.explained_node in self.spatial_players:
            raise InvalidArgumentError("the explained node cannot be a spatial player")
        if len(set(self.spatial_players)) != len(self.spatial_players):
            raise InvalidArgumentError("duplicate spatial players")
        if len(set(self.temporal_players)) != len(self.temporal_players):
            raise InvalidArgumentError("duplicate temporal players")

    @property
    def num_spatial(self) -> int:
        return len(self.spatial_players)

    @property
    def num_temporal(self) -> int:
        return len(self.temporal_players)

    @property
    def num_players(self) -> int:
        return self.num_spatial + self.num_temporal


def neighbourhood_player_map(graph, v: int, hops: int, window: int,
                             temporal_steps: int | None = None) -> PlayerMap:
    """Nodes within ``hops`` of ``v`` plus the last ``temporal_steps`` steps of the window."""
    steps = window if temporal_steps is None else temporal_steps
    if not 0 <= steps <= window:
        raise InvalidArgumentError(f"temporal_steps must be in [0, {window}]")
    return PlayerMap(v, tuple(graph.neighbourhood(v, hops)), tuple(range(window - steps, window)))


@dataclass(frozen=True)
class Coalition:
    spatial_mask: np.ndarray = field(repr=False)
    temporal_mask: np.ndarray = field(repr=False)

    def __post_init__(self):
        for name in ("spatial_mask", "temporal_mask"):
            arr = np.asarray(getattr(self, name), dtype=np.uint8)
            if arr.ndim != 1 or np.any(arr > 1):
                raise InvalidArgumentError(f"{name} must be a binary vector")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def from_z(cls, z, num_spatial: int) -> "Coalition":
        z = np.asarray(z, dtype=np.uint8)
        return cls(z[:num_spatial], z[num_spatial:])

    @property
    def z(self) -> np.ndarray:
        return np.concatenate([self.spatial_mask, self.temporal_mask])

    def __eq__(self, other):
        return isinstance(other, Coalition) and np.array_equal(self.z, other.z) and \
            len(self.spatial_mask) == len(other.spatial_mask)

    def __hash__(self):
        return hash((len(self.spatial_mask), self.z.tobytes()))


def coalition_matrix(num_players: int) -> np.ndarray:
    """All ``2**M`` coalitions in binary counting order; player 0 is the most significant bit."""
    if num_players > ENUMERATION_LIMIT:
        raise TooLargeError(
            f"{num_players} players exceed the enumeration limit of {ENUMERATION_LIMIT}; sample coalitions instead")
    codes = np.arange(2 ** num_players, dtype=np.int64)
    shifts = np.arange(num_players - 1, -1, -1, dtype=np.int64)
    return ((codes[:, None] >> shifts[None, :]) & 1).astype(np.uint8)


def enumerate_coalitions(pmap: PlayerMap) -> list[Coalition]:
    z = coalition_matrix(pmap.num_players)
    return [Coalition.from_z(row, pmap.num_spatial) for row in z]


def kernel_size_distribution(num_players: int) -> np.ndarray:
    """Probability of each coalition size ``1..M-1`` proportional to its total Shapley-kernel mass."""
    m = num_players
    sizes = np.arange(1, m)
    mass = (m - 1) / (sizes * (m - sizes))
    return mass / mass.sum()


def sample_coalition_matrix(num_players: int, n: int, seed) -> np.ndarray:
    """``n`` coalitions: empty and full first, then kernel-weighted random draws."""
    if n < 2:
        raise InvalidArgumentError("need at least 2 samples (the empty and full coalitions)")
    m = num_players
    z = np.zeros((n, m), dtype=np.uint8)
    z[1] = 1
    if n == 2 or m < 2:
        return z
    rng = np.random.default_rng(seed)
    sizes = rng.choice(np.arange(1, m), size=n - 2, p=kernel_size_distribution(m))
    for row, s in enumerate(sizes, start=2):
        z[row, rng.choice(m, size=s, replace=False)] = 1
    return z


def sample_coalitions(pmap: PlayerMap, n: int, seed) -> list[Coalition]:
    return [Coalition.from_z(row, pmap.num_spatial) for row in sample_coalition_matrix(pmap.num_players, n, seed)]


def keep_mask(shape_nt: tuple[int, int], pmap: PlayerMap, z: np.ndarray) -> np.ndarray:
    """Boolean ``(..., N, T)`` mask of window entries that keep their original value.

    ``z`` may be a single coalition vector or a stack ``(n, M)``.
    """
    n_nodes, n_steps = shape_nt
    z = np.asarray(z, dtype=bool)
    if z.shape[-1] != pmap.num_players:
        raise InvalidDimensionError(f"coalition has {z.shape[-1]} entries, player map has {pmap.num_players}")
    if pmap.explained_node >= n_nodes or any(i >= n_nodes for i in pmap.spatial_players) \
            or any(t >= n_steps for t in pmap.temporal_players):
        raise InvalidDimensionError("player map does not fit the window")
    lead = z.shape[:-1]
    node_on = np.ones(lead + (n_nodes,), dtype=bool)
    node_on[..., list(pmap.spatial_players)] = z[..., :pmap.num_spatial]
    time_on = np.ones(lead + (n_steps,), dtype=bool)
    time_on[..., list(pmap.temporal_players)] = z[..., pmap.num_spatial:]
    keep = node_on[..., :, None] & time_on[..., None, :]
    keep[..., pmap.explained_node, :] = True
    return keep


def apply_mask(x, pmap: PlayerMap, c: Coalition | np.ndarray, baseline=None) -> np.ndarray:
    """What-if window: original entries where kept, ``baseline`` entries elsewhere."""
    x = np.asarray(getattr(x, "values", x), dtype=np.float64)
    if x.ndim != 3:
        raise InvalidDimensionError(f"window must be (N, T, F), got {x.shape}")
    base = np.zeros_like(x) if baseline is None else np.asarray(getattr(baseline, "values", baseline),
                                                                dtype=np.float64)
    if base.shape != x.shape:
        raise InvalidDimensionError(f"baseline shape {base.shape} differs from window {x.shape}")
    z = c.z if isinstance(c, Coalition) else c
    keep = keep_mask(x.shape[:2], pmap, z)
    return np.where(keep[..., None], x, base)


def write_coalitions_csv(z: np.ndarray, path: str | Path, ids=None) -> None:
    z = np.asarray(z, dtype=np.uint8)
    ids = range(len(z)) if ids is None else ids
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["id"] + [f"p{j}" for j in range(z.shape[1])])
            for cid, row in zip(ids, z):
                writer.writerow([cid] + row.tolist())
    except OSError as exc:
        raise StorageError(f"cannot write coalitions to {path}: {exc}") from exc
