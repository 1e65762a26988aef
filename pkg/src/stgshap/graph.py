"""Lane-cell lattice graph and the spectral operators used by the predictor."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg
import scipy.sparse.linalg

from .errors import (
    ContractViolationError,
    ConvergenceError,
    InvalidArgumentError,
    InvalidDimensionError,
    StorageError,
)

# dense eigensolver is used below this size, Lanczos above
DENSE_EIG_LIMIT = 256


@dataclass(frozen=True)
class LatticeGraph:
    """Road segment discretised into ``num_lanes`` x ``num_cells`` nodes.

    Node ``i`` is ``(lane, cell)`` with ``i = lane * num_cells + cell``. Cell
    index grows in the direction of travel.
    """

    num_lanes: int
    num_cells: int
    adjacency: np.ndarray = field(repr=False)
    lateral_edges: bool = True

    @property
    def num_nodes(self) -> int:
        return self.num_lanes * self.num_cells

    @property
    def nodes(self) -> list[tuple[int, int]]:
        return [(lane, cell) for lane in range(self.num_lanes) for cell in range(self.num_cells)]

    def node_index(self, lane: int, cell: int) -> int:
        if not (0 <= lane < self.num_lanes and 0 <= cell < self.num_cells):
            raise InvalidArgumentError(f"node ({lane}, {cell}) outside {self.num_lanes}x{self.num_cells} grid")
        return lane * self.num_cells + cell

    def node_coords(self, index: int) -> tuple[int, int]:
        if not 0 <= index < self.num_nodes:
            raise InvalidArgumentError(f"node index {index} outside [0, {self.num_nodes})")
        return divmod(int(index), self.num_cells)

    def edges(self) -> list[tuple[int, int]]:
        src, dst = np.nonzero(np.triu(self.adjacency))
        return list(zip(src.tolist(), dst.tolist()))

    def hop_distances(self, source: int) -> np.ndarray:
        """Breadth-first hop counts from ``source``; unreachable nodes get -1."""
        dist = np.full(self.num_nodes, -1, dtype=int)
        dist[source] = 0
        frontier = [source]
        neighbours = [np.flatnonzero(row) for row in self.adjacency]
        d = 0
        while frontier:
            d += 1
            nxt = []
            for u in frontier:
                for w in neighbours[u]:
                    if dist[w] < 0:
                        dist[w] = d
                        nxt.append(int(w))
            frontier = nxt
        return dist

    def neighbourhood(self, source: int, hops: int) -> list[int]:
        """Nodes within ``hops`` of ``source`` (excluding it), in index order."""
        dist = self.hop_distances(source)
        return [int(i) for i in np.flatnonzero((dist > 0) & (dist <= hops))]


def build_lattice_graph(num_lanes: int, num_cells: int, lateral_edges: bool = True) -> LatticeGraph:
    if num_lanes < 1 or num_cells < 1:
        raise InvalidDimensionError(f"need at least one lane and one cell, got {num_lanes}x{num_cells}")
    n = num_lanes * num_cells
    adj = np.zeros((n, n))
    for lane in range(num_lanes):
        for cell in range(num_cells):
            i = lane * num_cells + cell
            if cell + 1 < num_cells:
                adj[i, i + 1] = adj[i + 1, i] = 1.0
            if lateral_edges and lane + 1 < num_lanes:
                j = i + num_cells
                adj[i, j] = adj[j, i] = 1.0
    adj.setflags(write=False)
    return LatticeGraph(num_lanes, num_cells, adj, lateral_edges)


def write_edge_list(graph: LatticeGraph, path: str | Path) -> None:
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["src", "dst"])
            writer.writerows(graph.edges())
    except OSError as exc:
        raise StorageError(f"cannot write edge list to {path}: {exc}") from exc


@dataclass(frozen=True)
class SpectralOperators:
    degree: np.ndarray = field(repr=False)
    laplacian: np.ndarray = field(repr=False)
    lambda_max: float
    scaled_laplacian: np.ndarray = field(repr=False)

    @property
    def num_nodes(self) -> int:
        return self.laplacian.shape[0]


def _check_adjacency(adj: np.ndarray) -> np.ndarray:
    adj = np.asarray(adj, dtype=np.float64)
    if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
        raise InvalidDimensionError(f"adjacency must be square, got shape {adj.shape}")
    if not np.array_equal(adj, adj.T):
        raise ContractViolationError("adjacency matrix is not symmetric")
    if np.any(adj < 0):
        raise ContractViolationError("adjacency matrix has negative entries")
    return adj


def normalized_laplacian(graph: LatticeGraph | np.ndarray) -> np.ndarray:
    """``I - D^-1/2 A D^-1/2``; isolated nodes keep an identity row."""
    adj = graph.adjacency if isinstance(graph, LatticeGraph) else graph
    adj = _check_adjacency(adj)
    deg = adj.sum(axis=1)
    inv_sqrt = np.zeros_like(deg)
    np.divide(1.0, np.sqrt(deg), out=inv_sqrt, where=deg > 0)
    lap = np.eye(adj.shape[0]) - inv_sqrt[:, None] * adj * inv_sqrt[None, :]
    # exact symmetry regardless of rounding order
    return 0.5 * (lap + lap.T)


def _power_iteration(lap: np.ndarray, tol: float, max_iter: int, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(lap.shape[0])
    x /= np.linalg.norm(x)
    rq = float(x @ lap @ x)
    for _ in range(max_iter):
        y = lap @ x
        norm = np.linalg.norm(y)
        if norm == 0.0:
            return 0.0
        x = y / norm
        new_rq = float(x @ lap @ x)
        if abs(new_rq - rq) <= tol * max(abs(new_rq), 1e-300):
            return new_rq
        rq = new_rq
    raise ConvergenceError(f"power iteration did not converge in {max_iter} iterations", rq)


def max_eigenvalue(lap: np.ndarray, method: str = "auto", tol: float = 1e-9, max_iter: int = 10_000) -> float:
    """Largest eigenvalue of a symmetric matrix.

    ``auto`` picks a dense solver for small matrices and Lanczos otherwise;
    ``power`` runs plain power iteration, which is only reliable when the top
    of the spectrum is well separated.
    """
    lap = np.asarray(lap, dtype=np.float64)
    if lap.ndim != 2 or lap.shape[0] != lap.shape[1]:
        raise InvalidDimensionError(f"expected a square matrix, got shape {lap.shape}")
    if not np.allclose(lap, lap.T, atol=1e-12):
        raise ContractViolationError("matrix is not symmetric")
    n = lap.shape[0]
    if method == "power":
        return _power_iteration(lap, tol, max_iter)
    if method == "dense" or (method == "auto" and n <= DENSE_EIG_LIMIT):
        return float(scipy.linalg.eigvalsh(lap, subset_by_index=[n - 1, n - 1])[0])
    if method not in ("auto", "lanczos"):
        raise InvalidArgumentError(f"unknown eigenvalue method {method!r}")
    v0 = np.random.default_rng(0).standard_normal(n)
    try:
        vals = scipy.sparse.linalg.eigsh(lap, k=1, which="LA", tol=tol * 1e-3, maxiter=max_iter, v0=v0,
                                         return_eigenvectors=False)
    except scipy.sparse.linalg.ArpackNoConvergence as exc:
        last = float(exc.eigenvalues[0]) if len(exc.eigenvalues) else float("nan")
        raise ConvergenceError("Lanczos iteration did not converge", last) from exc
    return float(vals[0])


def scaled_laplacian(lap: np.ndarray, lambda_max: float) -> np.ndarray:
    if not lambda_max > 0:
        raise InvalidArgumentError(f"lambda_max must be positive, got {lambda_max}")
    lap = np.asarray(lap, dtype=np.float64)
    return (2.0 / lambda_max) * lap - np.eye(lap.shape[0])


def spectral_operators(graph: LatticeGraph | np.ndarray, method: str = "auto") -> SpectralOperators:
    adj = graph.adjacency if isinstance(graph, LatticeGraph) else np.asarray(graph, dtype=np.float64)
    lap = normalized_laplacian(adj)
    lam = max_eigenvalue(lap, method=method)
    scaled = scaled_laplacian(lap, lam)
    for arr in (lap, scaled):
        arr.setflags(write=False)
    return SpectralOperators(np.diag(adj.sum(axis=1)), lap, lam, scaled)


def chebyshev_apply(scaled_lap: np.ndarray, x: np.ndarray, theta) -> np.ndarray:
    """Evaluate ``sum_k theta[k] T_k(scaled_lap) @ x`` with the three-term recursion.

    ``x`` may carry trailing axes; the operator acts on its first axis.
    """
    theta = np.asarray(theta, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if theta.ndim != 1 or theta.size < 1:
        raise InvalidArgumentError("theta must be a non-empty coefficient vector")
    if scaled_lap.ndim != 2 or scaled_lap.shape[0] != scaled_lap.shape[1] or scaled_lap.shape[1] != x.shape[0]:
        raise InvalidDimensionError(f"operator {scaled_lap.shape} incompatible with signal {x.shape}")
    t_prev = x
    out = theta[0] * t_prev
    if theta.size == 1:
        return out
    t_curr = scaled_lap @ x
    out = out + theta[1] * t_curr
    for k in range(2, theta.size):
        t_prev, t_curr = t_curr, 2.0 * (scaled_lap @ t_curr) - t_prev
        out = out + theta[k] * t_curr
    return out
