"""Shapley attributions for a single node prediction.

The surrogate is a linear model over the coalition vector ``z`` fitted by
Shapley-kernel weighted least squares. The empty- and full-coalition values
are imposed exactly by eliminating the intercept and the last coefficient, so
under full enumeration the fit reproduces the exact Shapley values.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.linalg

from .errors import (
    EvaluationError,
    InvalidArgumentError,
    InvalidDimensionError,
    SchemaError,
    SingularSystemError,
    StorageError,
    TooLargeError,
)
from .masking import PlayerMap, coalition_matrix, keep_mask, sample_coalition_matrix

EXACT_LIMIT = 20
DEFAULT_MAX_SAMPLES = 2048
# above this the normal equations are abandoned for an SVD-based solve
COND_LIMIT = 1e10
EXPLANATION_VERSION = 1


def shapley_kernel_weight(num_players: int, size: int) -> float:
    """``(M-1) / (C(M,s) s (M-s))``; returns ``inf`` for the empty and full coalitions."""
    m, s = num_players, size
    if m < 1 or not 0 <= s <= m:
        raise InvalidArgumentError(f"coalition size {s} invalid for {m} players")
    if s in (0, m):
        return math.inf
    return (m - 1) / (math.comb(m, s) * s * (m - s))


@dataclass(frozen=True)
class CoalitionDataset:
    """Coalition vectors ``z`` with model values ``y``.

    ``weights=None`` means the rows are weighted by the Shapley kernel (full or
    partial enumeration). Sampled data already follows the kernel, so its rows
    carry unit (count) weights.
    """

    z: np.ndarray
    y: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        z = np.atleast_2d(np.asarray(self.z, dtype=np.uint8))
        y = np.asarray(self.y, dtype=np.float64).ravel()
        if z.shape[0] != y.shape[0]:
            raise InvalidDimensionError(f"{z.shape[0]} coalitions but {y.shape[0]} values")
        if np.any(z > 1):
            raise InvalidArgumentError("coalition vectors must be binary")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=np.float64).ravel()
            if w.shape != y.shape or np.any(w < 0):
                raise InvalidDimensionError("weights must be non-negative, one per row")
            object.__setattr__(self, "weights", w)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "y", y)
        sizes = z.sum(axis=1)
        if not np.any(sizes == 0) or not np.any(sizes == self.num_players):
            raise InvalidArgumentError("dataset must contain the empty and the full coalition")

    @property
    def num_players(self) -> int:
        return self.z.shape[1]

    @property
    def f_empty(self) -> float:
        return float(self.y[np.flatnonzero(self.z.sum(axis=1) == 0)[0]])

    @property
    def f_full(self) -> float:
        return float(self.y[np.flatnonzero(self.z.sum(axis=1) == self.num_players)[0]])


@dataclass(frozen=True)
class PlayerCoord:
    index: int
    kind: str
    lane: int | None = None
    cell: int | None = None
    time_offset: int | None = None


@dataclass(frozen=True)
class ExplanationTarget:
    node: int
    lane: int | None = None
    cell: int | None = None
    feature: int = 0
    step: int = 0
    window_end: int | None = None


@dataclass
class Explanation:
    phi0: float
    phi: np.ndarray
    player_coords: list[PlayerCoord]
    target: ExplanationTarget | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def num_players(self) -> int:
        return len(self.phi)

    def to_dict(self) -> dict:
        players = [{"kind": c.kind, "lane": c.lane, "cell": c.cell, "time_offset": c.time_offset,
                    "phi": float(p)} for c, p in zip(self.player_coords, self.phi)]
        return {
            "version": EXPLANATION_VERSION,
            "target": None if self.target is None else asdict(self.target),
            "phi0": float(self.phi0),
            "players": players,
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Explanation":
        try:
            players = doc["players"]
            coords = [PlayerCoord(i, p["kind"], p.get("lane"), p.get("cell"), p.get("time_offset"))
                      for i, p in enumerate(players)]
            target = None if doc.get("target") is None else ExplanationTarget(**doc["target"])
            return cls(float(doc["phi0"]), np.array([p["phi"] for p in players], dtype=np.float64),
                       coords, target, doc.get("diagnostics", {}))
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"malformed explanation document: {exc}") from exc


def _aggregate(z: np.ndarray, y: np.ndarray, w: np.ndarray):
    """Merge duplicate coalitions: weights add, values average."""
    uniq, inverse = np.unique(z, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    counts = np.bincount(inverse, minlength=len(uniq))
    w_sum = np.bincount(inverse, weights=w, minlength=len(uniq))
    y_mean = np.bincount(inverse, weights=y, minlength=len(uniq)) / counts
    return uniq, y_mean, w_sum


def fit_wlr(data: CoalitionDataset) -> Explanation:
    m = data.num_players
    f_empty, f_full = data.f_empty, data.f_full
    delta = f_full - f_empty
    z = data.z
    sizes = z.sum(axis=1)
    if data.weights is None:
        w = np.array([0.0 if s in (0, m) else shapley_kernel_weight(m, int(s)) for s in sizes])
    else:
        w = data.weights
    interior = (sizes > 0) & (sizes < m)
    if interior.any():
        zu, yu, wu = _aggregate(z[interior], data.y[interior], w[interior])
    else:
        zu, yu, wu = np.zeros((0, m), np.uint8), np.zeros(0), np.zeros(0)
    diagnostics = {"n_samples": int(len(z)), "n_unique": int(len(zu)) + 2}

    if m == 1:
        phi = np.array([delta])
        diagnostics.update(condition_number=1.0, residual_norm=0.0, solver="closed-form")
        return _explanation(f_empty, phi, diagnostics)

    a = zu[:, :m - 1].astype(np.float64) - zu[:, m - 1:].astype(np.float64)
    b = yu - f_empty - zu[:, m - 1] * delta
    keep = wu > 0
    a, b, wu = a[keep], b[keep], wu[keep]
    if a.shape[0] == 0:
        raise SingularSystemError("no interior coalitions with positive weight; draw more samples", math.inf)
    gram = a.T @ (wu[:, None] * a)
    rhs = a.T @ (wu * b)
    cond = float(np.linalg.cond(gram)) if np.all(np.isfinite(gram)) else math.inf
    sol = None
    solver = "cholesky"
    if cond <= COND_LIMIT:
        try:
            sol = scipy.linalg.cho_solve(scipy.linalg.cho_factor(gram), rhs)
        except np.linalg.LinAlgError:
            sol = None
    if sol is None:
        solver = "lstsq"
        sw = np.sqrt(wu)
        sol, _, rank, _ = np.linalg.lstsq(sw[:, None] * a, sw * b, rcond=None)
        if rank < m - 1:
            raise SingularSystemError(
                f"regression system is rank deficient ({rank} < {m - 1}, condition number {cond:.3g}); "
                "increase n_samples", cond)
    phi = np.append(sol, delta - sol.sum())
    resid = a @ sol - b
    diagnostics.update(condition_number=cond, residual_norm=float(np.sqrt(np.sum(wu * resid ** 2))),
                       solver=solver)
    return _explanation(f_empty, phi, diagnostics)


def _explanation(phi0: float, phi: np.ndarray, diagnostics: dict) -> Explanation:
    coords = [PlayerCoord(i, "player") for i in range(len(phi))]
    return Explanation(float(phi0), np.asarray(phi, dtype=np.float64), coords, None, diagnostics)


def _evaluate_coalitions(value, z: np.ndarray) -> np.ndarray:
    if hasattr(value, "batch"):
        return np.asarray(value.batch(z), dtype=np.float64)
    return np.array([value(row) for row in z], dtype=np.float64)


def exact_shapley(value, num_players: int) -> np.ndarray:
    """Shapley values by full enumeration; ``value`` maps a 0/1 vector to a float."""
    m = num_players
    if m > EXACT_LIMIT:
        raise TooLargeError(f"exact Shapley values limited to {EXACT_LIMIT} players, got {m}")
    if m < 1:
        return np.zeros(0)
    z = coalition_matrix(m)
    vals = _evaluate_coalitions(value, z)
    sizes = z.sum(axis=1)
    weight_by_size = np.array([1.0 / (m * math.comb(m - 1, s)) for s in range(m)])
    codes = np.arange(len(z), dtype=np.int64)
    phi = np.empty(m)
    for j in range(m):
        bit = 1 << (m - 1 - j)
        without = codes[(codes & bit) == 0]
        phi[j] = np.sum(weight_by_size[sizes[without]] * (vals[without | bit] - vals[without]))
    return phi


def rank_players(e: Explanation, k: int, kind: str | None = None) -> list[tuple[PlayerCoord, float]]:
    """Top ``k`` players by ``|phi|``; ties keep player order."""
    if k < 0:
        raise InvalidArgumentError("k must be non-negative")
    order = sorted(range(e.num_players), key=lambda i: (-abs(float(e.phi[i])), i))
    if kind is not None:
        order = [i for i in order if e.player_coords[i].kind == kind]
    return [(e.player_coords[i], float(e.phi[i])) for i in order[:k]]


def player_coords(pmap: PlayerMap, graph, window_len: int) -> list[PlayerCoord]:
    coords = []
    for j, node in enumerate(pmap.spatial_players):
        lane, cell = graph.node_coords(node)
        coords.append(PlayerCoord(j, "spatial", lane, cell, None))
    for j, t in enumerate(pmap.temporal_players, start=pmap.num_spatial):
        coords.append(PlayerCoord(j, "temporal", None, None, int(t) - (window_len - 1)))
    return coords


def default_num_samples(num_players: int) -> int:
    return min(2 ** num_players, DEFAULT_MAX_SAMPLES) if num_players < 62 else DEFAULT_MAX_SAMPLES


class MaskedValue:
    """Value function over coalitions: mask the window, then query the model."""

    def __init__(self, model, x: np.ndarray, pmap: PlayerMap, baseline=None, chunk: int = 256, threads: int = 1):
        self.model = model
        self.x = np.asarray(getattr(x, "values", x), dtype=np.float64)
        self.base = np.zeros_like(self.x) if baseline is None else np.asarray(
            getattr(baseline, "values", baseline), dtype=np.float64)
        if self.base.shape != self.x.shape:
            raise InvalidDimensionError(f"baseline shape {self.base.shape} differs from window {self.x.shape}")
        self.pmap = pmap
        self.chunk = chunk
        self.threads = max(1, int(threads))

    def _chunk_values(self, z: np.ndarray) -> np.ndarray:
        keep = keep_mask(self.x.shape[:2], self.pmap, z)
        windows = np.where(keep[..., None], self.x, self.base)
        if hasattr(self.model, "batch"):
            return np.asarray(self.model.batch(windows), dtype=np.float64).ravel()
        return np.array([self.model(w) for w in windows], dtype=np.float64)

    def batch(self, z: np.ndarray) -> np.ndarray:
        z = np.atleast_2d(z)
        chunks = [z[i:i + self.chunk] for i in range(0, len(z), self.chunk)]
        if self.threads > 1 and len(chunks) > 1:
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                parts = list(pool.map(self._chunk_values, chunks))
        else:
            parts = [self._chunk_values(c) for c in chunks]
        vals = np.concatenate(parts) if parts else np.zeros(0)
        bad = np.flatnonzero(~np.isfinite(vals))
        if bad.size:
            raise EvaluationError(f"model returned a non-finite value for coalition {int(bad[0])}", int(bad[0]))
        return vals

    def __call__(self, z) -> float:
        return float(self.batch(np.asarray(z)[None])[0])


def explain(model, x, graph, pmap: PlayerMap, n_samples: int | None = None, seed=0, baseline=None,
            threads: int = 1, target: ExplanationTarget | None = None) -> Explanation:
    """Sample (or enumerate) coalitions, evaluate the masked model and fit the surrogate."""
    m = pmap.num_players
    n = default_num_samples(m) if n_samples is None else int(n_samples)
    if m == 0:
        raise InvalidArgumentError("player map has no players")
    value = MaskedValue(model, x, pmap, baseline, threads=threads)
    if m < 62 and 2 ** m <= n:
        z = coalition_matrix(m)
        weights = None
        mode = "enumeration"
    else:
        z = sample_coalition_matrix(m, n, seed)
        weights = np.ones(len(z))
        mode = "sampling"
    y = value.batch(z)
    e = fit_wlr(CoalitionDataset(z, y, weights))
    e.diagnostics["mode"] = mode
    lane, cell = graph.node_coords(pmap.explained_node)
    if target is None:
        target = ExplanationTarget(pmap.explained_node, lane, cell)
    else:
        target = replace(target, node=pmap.explained_node, lane=lane, cell=cell)
    return replace(e, player_coords=player_coords(pmap, graph, value.x.shape[1]), target=target)


def spatial_phi_grid(e: Explanation, num_lanes: int, num_cells: int) -> np.ndarray:
    grid = np.zeros((num_lanes, num_cells))
    for c, p in zip(e.player_coords, e.phi):
        if c.kind == "spatial":
            grid[c.lane, c.cell] = p
    return grid


def save_explanation(e: Explanation, path: str | Path) -> None:
    try:
        Path(path).write_text(json.dumps(e.to_dict(), indent=2) + "\n")
    except OSError as exc:
        raise StorageError(f"cannot write explanation to {path}: {exc}") from exc


def load_explanation(path: str | Path) -> Explanation:
    try:
        return Explanation.from_dict(json.loads(Path(path).read_text()))
    except OSError as exc:
        raise StorageError(f"cannot read explanation from {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path} is not valid JSON: {exc}") from exc


def export_spatial_phi(e: Explanation, path: str | Path) -> None:
    """Long-format ``lane,cell,phi`` rows for the spatial players."""
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["lane", "cell", "phi"])
            for c, p in zip(e.player_coords, e.phi):
                if c.kind == "spatial":
                    writer.writerow([c.lane, c.cell, repr(float(p))])
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc
