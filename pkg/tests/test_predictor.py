import numpy as np
import pytest

from oracles import fd_gradient_error, gradient_instance, naive_mse
from stgshap.errors import DivergenceError, InvalidDimensionError, SchemaError
from stgshap.graph import build_lattice_graph, spectral_operators
from stgshap.predictor import (
    Hyper,
    NodeValueFunction,
    constant_params,
    forward,
    identity_params,
    init_params,
    load_params,
    loss_and_gradient,
    mse_loss,
    predict_node,
    save_params,
)
from stgshap.tensor import TrafficTensor
from stgshap.training import TrainConfig, evaluate, fit, make_windows, persistence_forecast


@pytest.fixture(scope="module")
def small():
    graph = build_lattice_graph(2, 4)
    ops = spectral_operators(graph)
    hyper = Hyper(hidden=5, window=8)
    rng = np.random.default_rng(7)
    params = init_params(hyper, seed=3, mean=rng.random(3) * 10, std=1 + rng.random(3))
    x = rng.random((graph.num_nodes, 8, 3)) * 20
    return graph, ops, hyper, params, x


def test_hyper_rejects_short_window():
    with pytest.raises(Exception):
        Hyper(kernel_width=3, window=4)
    assert Hyper().out_width == 8


def test_zero_everything_gives_zero(small):
    graph, ops, hyper, _, _ = small
    out = forward(constant_params(hyper, 0.0), np.zeros((graph.num_nodes, hyper.window, 3)), ops)
    assert out.shape == (graph.num_nodes, 1, 3)
    assert np.array_equal(out, np.zeros_like(out))


def test_identity_configuration_returns_last_step(small):
    graph, ops, _, _, x = small
    params = identity_params(3, x.shape[1])
    assert np.allclose(forward(params, x, ops)[:, 0, :], x[:, -1, :], atol=1e-12)
    assert predict_node(params, x, ops, 5, 2) == pytest.approx(x[5, -1, 2], abs=1e-12)


def test_forward_is_deterministic(small):
    _, ops, _, params, x = small
    assert np.array_equal(forward(params, x, ops), forward(params, x, ops))


def test_predict_node_projects_forward(small):
    graph, ops, _, params, x = small
    full = forward(params, x, ops)
    for v in range(graph.num_nodes):
        for f in range(3):
            assert predict_node(params, x, ops, v, f) == full[v, 0, f]


def test_batched_forward_matches_single(small):
    _, ops, _, params, x = small
    stack = np.stack([x, 0.5 * x, x + 1])
    batched = forward(params, stack, ops)
    for b in range(3):
        assert np.allclose(batched[b], forward(params, stack[b], ops), atol=1e-12)
    value = NodeValueFunction(params, ops, 3, 1)
    assert np.allclose(value.batch(stack), [value(w) for w in stack], atol=1e-12)


def test_forward_rejects_wrong_shape(small):
    _, ops, _, params, x = small
    with pytest.raises(InvalidDimensionError):
        forward(params, x[:, :5], ops)


def test_mse_examples(rng):
    assert mse_loss(np.ones((2, 3, 1)), np.ones((2, 3, 1))) == 0.0
    assert mse_loss(np.ones((2, 3, 1)), np.zeros((2, 3, 1))) == pytest.approx(1.0)
    a, b = rng.standard_normal((2, 4, 5, 3))
    assert mse_loss(a, b) == pytest.approx(naive_mse(a, b), abs=1e-12)


def test_permutation_equivariance(small, rng):
    graph, ops, _, params, x = small
    perm = rng.permutation(graph.num_nodes)
    adj = graph.adjacency[np.ix_(perm, perm)]
    out = forward(params, x, ops)
    out_perm = forward(params, x[perm], spectral_operators(adj))
    assert np.max(np.abs(out_perm - out[perm])) < 1e-10
    truth = rng.random(out.shape)
    assert mse_loss(truth[perm], out[perm]) == pytest.approx(mse_loss(truth, out), abs=1e-12)


def test_zero_residual_gives_zero_gradient(small):
    _, ops, _, params, x = small
    truth = forward(params, x, ops)
    _, grads = loss_and_gradient(params, x, truth, ops)
    assert max(np.abs(g).max() for g in grads.values()) < 1e-12


def test_dead_channel_has_zero_gradient(small, rng):
    _, ops, _, params, x = small
    w3 = params.w3.copy()
    w3[:, 2, :] = 0.0  # graph-conv channel 2 feeds nothing downstream
    dead = params.with_arrays({"w3": w3})
    _, grads = loss_and_gradient(dead, x, rng.random((x.shape[0], 1, 3)), ops)
    assert np.array_equal(grads["theta"][:, :, 2], np.zeros_like(grads["theta"][:, :, 2]))
    assert grads["b2"][2] == 0.0


@pytest.mark.parametrize("seed", range(3))
def test_gradient_matches_finite_differences(seed):
    assert fd_gradient_error(*gradient_instance(seed)) < 1e-6


def test_float32_gradient_close_to_float64():
    params, x, y, ops = gradient_instance(0)
    _, g64 = loss_and_gradient(params, x, y, ops)
    _, g32 = loss_and_gradient(params.astype(np.float32), x, y, ops)
    for name in g64:
        scale = max(1e-3, np.abs(g64[name]).max())
        assert np.abs(g32[name].astype(np.float64) - g64[name]).max() / scale < 1e-3


def _tiny_dataset(seed=0):
    graph = build_lattice_graph(2, 3)
    rng = np.random.default_rng(seed)
    t = np.arange(60)
    base = 30 + 10 * np.sin(2 * np.pi * (t[None, :] - np.arange(6)[:, None]) / 20)
    values = np.stack([base * 20, base, 70 - base], axis=-1) + rng.random((6, 60, 3))
    tensor = TrafficTensor(values, 2, 3)
    return graph, tensor


def test_training_is_deterministic():
    graph, tensor = _tiny_dataset()
    hyper = Hyper(hidden=4, window=8)
    data = make_windows(tensor, 8)
    cfg = TrainConfig(learning_rate=1e-2, epochs=3, batch=8, seed=4)
    a, b = fit(data, graph, hyper, cfg), fit(data, graph, hyper, cfg)
    assert a.losses == b.losses
    for name, arr in a.params.arrays().items():
        assert np.array_equal(arr, b.params.arrays()[name])


@pytest.mark.parametrize("optimizer", ["adam", "sgd"])
def test_zero_learning_rate_leaves_params_unchanged(optimizer):
    graph, tensor = _tiny_dataset()
    hyper = Hyper(hidden=4, window=8)
    x, y = make_windows(tensor, 8)
    result = fit((x, y), graph, hyper, TrainConfig(learning_rate=0.0, epochs=2, batch=8, seed=1,
                                                    optimizer=optimizer))
    start = init_params(hyper, seed=1, mean=result.params.mean, std=result.params.std)
    for name, arr in start.arrays().items():
        assert np.array_equal(arr, result.params.arrays()[name])
    assert result.losses[0] == result.losses[1]


def test_training_reduces_loss():
    graph, tensor = _tiny_dataset()
    hyper = Hyper(hidden=8, window=8)
    result = fit(make_windows(tensor, 8), graph, hyper, TrainConfig(learning_rate=1e-2, epochs=40, batch=8))
    assert result.losses[-1] < 0.5 * result.losses[0]


def test_constant_dataset_is_learned():
    graph = build_lattice_graph(1, 4)
    tensor = TrafficTensor(np.full((4, 40, 3), 5.0), 1, 4)
    result = fit(make_windows(tensor, 6), graph, Hyper(hidden=4, window=6),
                 TrainConfig(learning_rate=1e-2, epochs=200, batch=16))
    assert result.losses[-1] < 1e-4


def test_divergence_reports_epoch():
    graph, tensor = _tiny_dataset()
    with pytest.raises(DivergenceError) as info:
        fit(make_windows(tensor, 8), graph, Hyper(hidden=4, window=8),
            TrainConfig(learning_rate=1e30, epochs=5, batch=8, optimizer="sgd"))
    assert info.value.epoch >= 1


def test_windows_and_persistence():
    values = np.arange(2 * 10 * 3, dtype=float).reshape(2, 10, 3)
    x, y = make_windows(values, 4, horizon=2)
    assert x.shape == (5, 2, 4, 3) and y.shape == (5, 2, 2, 3)
    assert np.array_equal(x[1, :, :, :], values[:, 1:5, :])
    assert np.array_equal(y[1], values[:, 5:7, :])
    assert np.array_equal(persistence_forecast(x, 2)[1], np.repeat(values[:, 4:5, :], 2, axis=1))


def test_evaluate_reports_persistence(small):
    graph, ops, _, _, _ = small
    params = identity_params(3, 8)
    rng = np.random.default_rng(0)
    x = rng.random((4, graph.num_nodes, 8, 3))
    y = rng.random((4, graph.num_nodes, 1, 3))
    model, naive = evaluate(params, x, y, ops)
    assert model == pytest.approx(naive, abs=1e-12)


@pytest.mark.parametrize("dtype", [np.float64, np.float32])
def test_params_round_trip(tmp_path, small, dtype):
    _, ops, _, params, x = small
    params = params.astype(dtype)
    params.meta = {"note": "x"}
    save_params(params, tmp_path / "p.json")
    back = load_params(tmp_path / "p.json")
    assert back.dtype == dtype and back.meta == {"note": "x"}
    assert np.array_equal(forward(back, x, ops), forward(params, x, ops))


def test_load_params_rejects_foreign_json(tmp_path):
    (tmp_path / "p.json").write_text('{"hello": 1}')
    with pytest.raises(SchemaError):
        load_params(tmp_path / "p.json")
