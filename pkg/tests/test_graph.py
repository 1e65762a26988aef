import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stgshap.errors import ContractViolationError, InvalidArgumentError, InvalidDimensionError
from oracles import explicit_chebyshev
from stgshap.graph import (
    build_lattice_graph,
    chebyshev_apply,
    max_eigenvalue,
    normalized_laplacian,
    scaled_laplacian,
    spectral_operators,
    write_edge_list,
)


def random_scaled(rng, n=10, p=0.4):
    a = np.triu((rng.random((n, n)) < p).astype(float), 1)
    a = a + a.T
    return spectral_operators(a).scaled_laplacian


def test_small_lattices():
    assert np.array_equal(build_lattice_graph(1, 2, lateral_edges=False).adjacency, [[0, 1], [1, 0]])
    assert np.array_equal(build_lattice_graph(2, 1, lateral_edges=True).adjacency, [[0, 1], [1, 0]])
    assert np.array_equal(build_lattice_graph(2, 1, lateral_edges=False).adjacency, np.zeros((2, 2)))


def test_corridor_grid_has_684_nodes():
    assert build_lattice_graph(4, 171).num_nodes == 684


def test_node_ordering_and_edges():
    g = build_lattice_graph(3, 4)
    for i, (lane, cell) in enumerate(g.nodes):
        assert i == lane * 4 + cell == g.node_index(lane, cell)
        assert g.node_coords(i) == (lane, cell)
    # 3 lanes x 3 longitudinal + 2 lateral bands x 4 cells
    assert len(g.edges()) == 3 * 3 + 2 * 4
    assert g.hop_distances(0)[g.node_index(2, 3)] == 5
    assert g.neighbourhood(g.node_index(1, 1), 1) == [1, 4, 6, 9]


def test_invalid_dimensions():
    with pytest.raises(InvalidDimensionError):
        build_lattice_graph(0, 5)
    with pytest.raises(InvalidArgumentError):
        build_lattice_graph(2, 2).node_index(2, 0)


def test_edge_list_csv(tmp_path):
    path = tmp_path / "edges.csv"
    write_edge_list(build_lattice_graph(1, 3), path)
    assert path.read_text().splitlines() == ["src,dst", "0,1", "1,2"]


def test_laplacian_examples():
    assert np.allclose(normalized_laplacian(np.array([[0.0, 1], [1, 0]])), [[1, -1], [-1, 1]])
    assert np.array_equal(normalized_laplacian(np.zeros((3, 3))), np.eye(3))
    cycle = np.roll(np.eye(4), 1, axis=1)
    cycle = cycle + cycle.T
    eig = np.linalg.eigvalsh(normalized_laplacian(cycle))
    assert np.allclose(eig, [0, 1, 1, 2], atol=1e-12)
    assert max_eigenvalue(normalized_laplacian(cycle)) == pytest.approx(2.0, abs=1e-9)


def test_laplacian_rejects_asymmetric():
    with pytest.raises(ContractViolationError):
        normalized_laplacian(np.array([[0.0, 1], [0, 0]]))


@pytest.mark.parametrize("method", ["dense", "lanczos", "power"])
def test_max_eigenvalue_methods(method):
    assert max_eigenvalue(np.eye(3), method=method) == pytest.approx(1.0, abs=1e-9)
    assert max_eigenvalue(np.array([[1.0, -1], [-1, 1]]), method=method) == pytest.approx(2.0, abs=1e-8)


def test_lanczos_matches_dense_on_large_lattice():
    lap = normalized_laplacian(build_lattice_graph(4, 80))
    assert max_eigenvalue(lap, "lanczos") == pytest.approx(max_eigenvalue(lap, "dense"), abs=1e-9)


def test_scaled_laplacian_examples():
    assert np.array_equal(scaled_laplacian(np.eye(3), 2.0), np.zeros((3, 3)))
    assert np.allclose(scaled_laplacian(np.array([[1.0, -1], [-1, 1]]), 2.0), [[0, -1], [-1, 0]])
    with pytest.raises(InvalidArgumentError):
        scaled_laplacian(np.eye(2), 0.0)


def test_chebyshev_low_orders(rng):
    lt = random_scaled(rng)
    x = rng.standard_normal(10)
    assert np.array_equal(chebyshev_apply(lt, x, [1.0]), x)
    assert np.allclose(chebyshev_apply(lt, x, [0.0, 1.0]), lt @ x, atol=1e-14)


def test_chebyshev_matches_matrix_polynomial(rng):
    lt = random_scaled(rng)
    x = rng.standard_normal(10)
    theta = rng.standard_normal(5)
    assert np.max(np.abs(chebyshev_apply(lt, x, theta) - explicit_chebyshev(lt, x, theta))) < 1e-10


@pytest.mark.parametrize("k", range(7))
def test_chebyshev_unit_coefficients(rng, k):
    lt = random_scaled(rng)
    x = rng.standard_normal((10, 3))
    theta = np.eye(7)[k]
    assert np.max(np.abs(chebyshev_apply(lt, x, theta) - explicit_chebyshev(lt, x, theta))) < 1e-10


def test_chebyshev_linearity(rng):
    lt = random_scaled(rng)
    x, y = rng.standard_normal((2, 10))
    theta, phi = rng.standard_normal((2, 4))
    a, b = 0.7, -1.3
    assert np.allclose(chebyshev_apply(lt, a * x + b * y, theta),
                       a * chebyshev_apply(lt, x, theta) + b * chebyshev_apply(lt, y, theta), atol=1e-12)
    assert np.allclose(chebyshev_apply(lt, x, a * theta + b * phi),
                       a * chebyshev_apply(lt, x, theta) + b * chebyshev_apply(lt, x, phi), atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 16), st.booleans())
def test_lattice_spectrum_in_range(lanes, cells, lateral):
    g = build_lattice_graph(lanes, cells, lateral)
    eig = np.linalg.eigvalsh(normalized_laplacian(g))
    assert eig.min() >= -1e-12 and eig.max() <= 2 + 1e-12
    ops = spectral_operators(g)
    if g.num_nodes > 1:
        assert ops.lambda_max == pytest.approx(eig.max(), abs=1e-9)
