import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import TableGame, permutation_shapley
from stgshap.errors import EvaluationError, InvalidArgumentError, SingularSystemError, TooLargeError
from stgshap.explainer import (
    CoalitionDataset,
    Explanation,
    PlayerCoord,
    exact_shapley,
    explain,
    export_spatial_phi,
    fit_wlr,
    load_explanation,
    rank_players,
    save_explanation,
    shapley_kernel_weight,
    spatial_phi_grid,
)
from stgshap.graph import build_lattice_graph, spectral_operators
from stgshap.masking import (
    PlayerMap,
    coalition_matrix,
    keep_mask,
    neighbourhood_player_map,
    sample_coalition_matrix,
)
from stgshap.predictor import Hyper, NodeValueFunction, constant_params, init_params

TWO_PLAYER = {(0, 0): 0.0, (1, 0): 1.0, (0, 1): 2.0, (1, 1): 4.0}


def two_player(z):
    return TWO_PLAYER[tuple(int(b) for b in z)]


def enumerated(value, m):
    z = coalition_matrix(m)
    return CoalitionDataset(z, [value(row) for row in z])


def test_kernel_weight_examples():
    assert shapley_kernel_weight(3, 1) == pytest.approx(1 / 3)
    assert shapley_kernel_weight(3, 2) == pytest.approx(1 / 3)
    assert shapley_kernel_weight(2, 1) == pytest.approx(1 / 2)
    assert shapley_kernel_weight(4, 0) == np.inf == shapley_kernel_weight(4, 4)
    with pytest.raises(InvalidArgumentError):
        shapley_kernel_weight(3, 4)


def test_two_player_game():
    e = fit_wlr(enumerated(two_player, 2))
    assert e.phi0 == 0.0
    assert np.allclose(e.phi, [1.5, 2.5], atol=1e-12)
    assert np.allclose(exact_shapley(two_player, 2), [1.5, 2.5], atol=1e-15)


def test_additive_and_constant_games(rng):
    a = rng.standard_normal(6)
    e = fit_wlr(enumerated(lambda z: float(a @ z) + 3.0, 6))
    assert np.allclose(e.phi, a, atol=1e-12) and e.phi0 == pytest.approx(3.0)
    c = fit_wlr(enumerated(lambda z: 2.5, 6))
    assert np.allclose(c.phi, 0, atol=1e-14) and c.phi0 == 2.5


@pytest.mark.parametrize("m", [1, 2, 3, 5])
def test_exact_shapley_matches_permutation_oracle(rng, m):
    game = TableGame(m, rng)
    assert np.allclose(exact_shapley(game, m), permutation_shapley(game, m), atol=1e-12)


def test_exact_shapley_axioms(rng):
    # symmetric game: value depends on size only
    sizes = rng.standard_normal(6)
    phi = exact_shapley(lambda z: sizes[int(np.sum(z))], 5)
    assert np.allclose(phi, phi[0], atol=1e-14)
    # player 2 is a dummy
    game = TableGame(4, rng)
    dummy = lambda z: game(np.array([z[0], z[1], 0, z[3]]))  # noqa: E731
    assert abs(exact_shapley(dummy, 4)[2]) < 1e-15
    with pytest.raises(TooLargeError):
        exact_shapley(game, 21)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 9), st.integers(0, 2**32 - 1))
def test_enumerated_fit_equals_exact(m, seed):
    game = TableGame(m, np.random.default_rng(seed))
    e = fit_wlr(CoalitionDataset(coalition_matrix(m), game.batch(coalition_matrix(m))))
    assert np.max(np.abs(e.phi - exact_shapley(game, m))) < 1e-8
    assert e.phi0 + e.phi.sum() == pytest.approx(game(np.ones(m)), abs=1e-9)


def test_fit_on_samples_is_efficient_and_deterministic(rng):
    game = TableGame(12, rng)
    z = sample_coalition_matrix(12, 600, seed=1)
    e = fit_wlr(CoalitionDataset(z, game.batch(z), np.ones(len(z))))
    assert e.phi0 == game(np.zeros(12))
    assert e.phi0 + e.phi.sum() == pytest.approx(game(np.ones(12)), abs=1e-9)
    assert e.diagnostics["n_unique"] <= 600 and e.diagnostics["solver"] in ("cholesky", "lstsq")
    e2 = fit_wlr(CoalitionDataset(z, game.batch(z), np.ones(len(z))))
    assert np.array_equal(e.phi, e2.phi)


def test_duplicates_are_aggregated(rng):
    game = TableGame(3, rng)
    z = coalition_matrix(3)
    doubled = np.concatenate([z, z[1:7]])
    e = fit_wlr(CoalitionDataset(doubled, game.batch(doubled), np.ones(len(doubled))))
    assert e.diagnostics["n_samples"] == 14 and e.diagnostics["n_unique"] == 8


def test_rank_deficient_sample_raises():
    z = np.array([[0, 0, 0], [1, 1, 1], [1, 0, 0], [1, 0, 0]], dtype=np.uint8)
    with pytest.raises(SingularSystemError):
        fit_wlr(CoalitionDataset(z, [0, 3, 1, 1], np.ones(4)))


def test_dataset_requires_anchors():
    with pytest.raises(InvalidArgumentError):
        CoalitionDataset(np.array([[1, 0], [1, 1]]), [1, 2])


def _expl(phi):
    return Explanation(0.0, np.array(phi, dtype=float), [PlayerCoord(i, "spatial") for i in range(len(phi))])


def test_rank_players():
    order = [c.index + 1 for c, _ in rank_players(_expl([0, 5, -7]), 3)]
    assert order == [3, 2, 1]
    assert [c.index for c, _ in rank_players(_expl([0, 0, 0, 0]), 4)] == [0, 1, 2, 3]
    assert rank_players(_expl([1, 2]), 0) == []


@pytest.fixture(scope="module")
def model_setup():
    graph = build_lattice_graph(2, 4)
    ops = spectral_operators(graph)
    hyper = Hyper(hidden=4, window=6)
    params = init_params(hyper, seed=2, mean=np.array([1000, 30, 50.0]), std=np.array([300, 10, 10.0]))
    rng = np.random.default_rng(5)
    x = np.stack([rng.normal(1000, 300, (8, 6)), rng.normal(30, 10, (8, 6)), rng.normal(50, 10, (8, 6))], -1)
    return graph, ops, hyper, params, np.abs(x)


def test_explain_constant_model(model_setup):
    graph, ops, hyper, _, x = model_setup
    model = NodeValueFunction(constant_params(hyper, 7.0), ops, 1, 2)
    pmap = neighbourhood_player_map(graph, 1, 2, hyper.window, 3)
    e = explain(model, x, graph, pmap)
    assert np.all(e.phi == 0) and e.phi0 == 7.0


def test_explain_row_sum_model(model_setup):
    graph, _, _, _, x = model_setup
    pmap = PlayerMap(1, (0, 2, 5), (4, 5))

    def row_sum(w):  # sum of the masked rows of the spatial players at feature 1
        return float(w[[0, 2, 5], :, 1].sum())

    e = explain(row_sum, x, graph, pmap)
    assert e.diagnostics["mode"] == "enumeration"
    table = {tuple(z): row_sum(np.where(keep_mask(x.shape[:2], pmap, z)[..., None], x, 0)) for z in coalition_matrix(5)}
    exact = exact_shapley(lambda z: table[tuple(z)], 5)
    assert np.max(np.abs(e.phi - exact)) < 1e-8


def test_explain_is_reproducible_and_threads_agree(model_setup):
    graph, ops, hyper, params, x = model_setup
    model = NodeValueFunction(params, ops, 5, 0)
    pmap = neighbourhood_player_map(graph, 5, 2, hyper.window)
    assert pmap.num_players > 11  # forces sampling
    a = explain(model, x, graph, pmap, n_samples=700, seed=4)
    b = explain(model, x, graph, pmap, n_samples=700, seed=4, threads=3)
    assert a.diagnostics["mode"] == "sampling"
    assert np.array_equal(a.phi, b.phi) and a.phi0 == b.phi0
    assert a.phi0 + a.phi.sum() == pytest.approx(model(x), abs=1e-9)


def test_explain_reports_non_finite(model_setup):
    graph, _, hyper, _, x = model_setup
    pmap = PlayerMap(0, (1,), (5,))
    with pytest.raises(EvaluationError) as info:
        explain(lambda w: np.inf if w[1].sum() == 0 else 1.0, x, graph, pmap)
    assert info.value.coalition_id is not None


def test_explanation_files(tmp_path, model_setup):
    graph, ops, hyper, params, x = model_setup
    model = NodeValueFunction(params, ops, 5, 0)
    e = explain(model, x, graph, neighbourhood_player_map(graph, 5, 1, hyper.window, 2))
    save_explanation(e, tmp_path / "e.json")
    back = load_explanation(tmp_path / "e.json")
    assert np.array_equal(back.phi, e.phi) and back.phi0 == e.phi0 and back.target == e.target
    assert [c.kind for c in back.player_coords] == ["spatial"] * 3 + ["temporal"] * 2
    assert [c.time_offset for c in back.player_coords[3:]] == [-1, 0]
    grid = spatial_phi_grid(e, 2, 4)
    assert grid[1, 1] == 0 and grid[0, 1] == e.phi[0]
    export_spatial_phi(e, tmp_path / "s.csv")
    assert (tmp_path / "s.csv").read_text().splitlines()[0] == "lane,cell,phi"
