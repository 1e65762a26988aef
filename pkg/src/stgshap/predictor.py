"""Single-block spatiotemporal graph convolutional network.

Layout of one forward pass on a standardised window ``(B, N, tau, F)``::

    temporal conv (F -> C, width Kt) + ReLU
    Chebyshev graph conv (C -> C, order K) + ReLU
    temporal conv (C -> C, width Kt) + ReLU
    output conv spanning the remaining width (C -> F for each horizon step)

Gradients are derived by hand; there is no autodiff dependency.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.sparse

from .errors import InvalidArgumentError, InvalidDimensionError, SchemaError, StorageError
from .graph import SpectralOperators
from .tensor import TrafficTensor

PARAMS_FORMAT = "stgshap-params"
PARAMS_VERSION = 1
PARAM_NAMES = ("w1", "b1", "theta", "b2", "w3", "b3", "wo", "bo")


@dataclass(frozen=True)
class Hyper:
    cheb_order: int = 3
    kernel_width: int = 3
    hidden: int = 16
    window: int = 12
    horizon: int = 1
    num_features: int = 3

    def __post_init__(self):
        for name in ("cheb_order", "kernel_width", "hidden", "window", "horizon", "num_features"):
            if getattr(self, name) < 1:
                raise InvalidArgumentError(f"{name} must be >= 1")
        if self.out_width < 1:
            raise InvalidArgumentError(
                f"window {self.window} too short for two temporal convs of width {self.kernel_width}")

    @property
    def out_width(self) -> int:
        """Temporal width left after both temporal convolutions."""
        return self.window - 2 * (self.kernel_width - 1)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        kt, f, c, k = self.kernel_width, self.num_features, self.hidden, self.cheb_order
        return {
            "w1": (kt, f, c), "b1": (c,),
            "theta": (k, c, c), "b2": (c,),
            "w3": (kt, c, c), "b3": (c,),
            "wo": (self.out_width, c, self.horizon, f), "bo": (self.horizon, f),
        }


@dataclass
class StgcnParams:
    hyper: Hyper
    w1: np.ndarray
    b1: np.ndarray
    theta: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray
    wo: np.ndarray
    bo: np.ndarray
    # per-feature standardisation, applied to inputs and inverted on outputs
    mean: np.ndarray = field(default=None)
    std: np.ndarray = field(default=None)
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        f = self.hyper.num_features
        if self.mean is None:
            self.mean = np.zeros(f)
        if self.std is None:
            self.std = np.ones(f)
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        for name, shape in self.hyper.shapes().items():
            if getattr(self, name).shape != shape:
                raise InvalidDimensionError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if self.mean.shape != (f,) or self.std.shape != (f,) or np.any(self.std <= 0):
            raise InvalidDimensionError("scaler must hold one mean and one positive std per feature")

    @property
    def dtype(self):
        return self.w1.dtype

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def with_arrays(self, arrays: dict[str, np.ndarray]) -> "StgcnParams":
        return replace(self, **arrays)

    def astype(self, dtype) -> "StgcnParams":
        return self.with_arrays({k: v.astype(dtype) for k, v in self.arrays().items()})

    def standardize(self, x: np.ndarray) -> np.ndarray:
        return ((x - self.mean) / self.std).astype(self.dtype, copy=False)

    def destandardize(self, y: np.ndarray) -> np.ndarray:
        return y.astype(np.float64) * self.std + self.mean


def init_params(hyper: Hyper, seed: int = 0, dtype=np.float64, mean=None, std=None) -> StgcnParams:
    """Uniform ``+-1/sqrt(fan_in)`` weights, zero biases."""
    rng = np.random.default_rng(seed)
    shapes = hyper.shapes()
    fan_in = {
        "w1": hyper.kernel_width * hyper.num_features,
        "theta": hyper.cheb_order * hyper.hidden,
        "w3": hyper.kernel_width * hyper.hidden,
        "wo": hyper.out_width * hyper.hidden,
    }
    arrays = {}
    for name in PARAM_NAMES:
        if name in fan_in:
            bound = 1.0 / np.sqrt(fan_in[name])
            arrays[name] = rng.uniform(-bound, bound, size=shapes[name]).astype(dtype)
        else:
            arrays[name] = np.zeros(shapes[name], dtype=dtype)
    return StgcnParams(hyper=hyper, mean=mean, std=std, seed=int(seed), **arrays)


def _scaled_lap(ops, dtype):
    lap = ops.scaled_laplacian if isinstance(ops, SpectralOperators) else ops
    if scipy.sparse.issparse(lap):
        return lap.astype(dtype)
    lap = np.asarray(lap).astype(dtype, copy=False)
    if lap.ndim == 2 and lap.shape[0] > 32 and np.count_nonzero(lap) < 0.1 * lap.size:
        return scipy.sparse.csr_matrix(lap)
    return lap


def _as_batch(window, params: StgcnParams, n_nodes: int) -> tuple[np.ndarray, bool]:
    x = window.values if isinstance(window, TrafficTensor) else np.asarray(window, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    hy = params.hyper
    if x.ndim != 4 or x.shape[1:] != (n_nodes, hy.window, hy.num_features):
        raise InvalidDimensionError(
            f"window shape {x.shape[-3:]} does not match (N={n_nodes}, tau={hy.window}, F={hy.num_features})")
    return x, single


# Internal activations are laid out node-first, (N, B, T, C), so that the
# graph operator is a single matrix product over the leading axis.

def _im2col(x: np.ndarray, width: int) -> np.ndarray:
    out_len = x.shape[2] - width + 1
    return np.concatenate([x[:, :, k:k + out_len, :] for k in range(width)], axis=-1)


def _channel_mul(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    return (x.reshape(-1, x.shape[-1]) @ w).reshape(x.shape[:-1] + (w.shape[-1],))


def _tconv(x: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    cols = _im2col(x, w.shape[0])
    return _channel_mul(cols, w.reshape(-1, w.shape[-1])), cols


def _node_mul(lap, h: np.ndarray) -> np.ndarray:
    return np.asarray(lap @ h.reshape(h.shape[0], -1)).reshape(h.shape)


def _forward(params: StgcnParams, xs: np.ndarray, lap):
    """``xs`` is standardised input in (B, N, T, F); returns output in (B, N, h, F)."""
    x = np.ascontiguousarray(xs.transpose(1, 0, 2, 3))
    p1, cols1 = _tconv(x, params.w1)
    p1 += params.b1
    h1 = np.maximum(p1, 0)
    basis = [h1]
    if params.hyper.cheb_order > 1:
        basis.append(_node_mul(lap, h1))
    for _ in range(2, params.hyper.cheb_order):
        basis.append(2 * _node_mul(lap, basis[-1]) - basis[-2])
    stacked = np.concatenate(basis, axis=-1)
    theta = params.theta
    p2 = _channel_mul(stacked, theta.reshape(-1, theta.shape[-1]))
    p2 += params.b2
    h2 = np.maximum(p2, 0)
    p3, cols3 = _tconv(h2, params.w3)
    p3 += params.b3
    h3 = np.maximum(p3, 0)
    n, b = h3.shape[:2]
    wo = params.wo
    y = h3.reshape(n * b, -1) @ wo.reshape(-1, wo.shape[2] * wo.shape[3])
    y = y.reshape(n, b, wo.shape[2], wo.shape[3]) + params.bo
    return y.transpose(1, 0, 2, 3), (cols1, p1, stacked, p2, cols3, p3, h3)


def _tconv_backward(cols: np.ndarray, w: np.ndarray, d_out: np.ndarray, in_len: int | None):
    d2 = d_out.reshape(-1, d_out.shape[-1])
    dw = (cols.reshape(-1, cols.shape[-1]).T @ d2).reshape(w.shape)
    if in_len is None:
        return dw, None
    dcols = _channel_mul(d_out, w.reshape(-1, w.shape[-1]).T)
    width, c_in = w.shape[0], w.shape[1]
    out_len = d_out.shape[2]
    dx = np.zeros(d_out.shape[:2] + (in_len, c_in), dtype=d_out.dtype)
    for k in range(width):
        dx[:, :, k:k + out_len, :] += dcols[..., k * c_in:(k + 1) * c_in]
    return dw, dx


def _backward(params: StgcnParams, cache, dy: np.ndarray, lap) -> dict[str, np.ndarray]:
    cols1, p1, stacked, p2, cols3, p3, h3 = cache
    n, b, t3, c = h3.shape
    wo = params.wo
    dy_n = np.ascontiguousarray(dy.transpose(1, 0, 2, 3)).reshape(n * b, -1)
    grads = {"bo": dy.sum(axis=(0, 1)),
             "wo": (h3.reshape(n * b, -1).T @ dy_n).reshape(wo.shape)}
    dh3 = (dy_n @ wo.reshape(t3 * c, -1).T).reshape(h3.shape)
    dp3 = dh3 * (p3 > 0)
    grads["b3"] = dp3.sum(axis=(0, 1, 2))
    grads["w3"], dh2 = _tconv_backward(cols3, params.w3, dp3, p2.shape[2])
    dp2 = dh2 * (p2 > 0)
    grads["b2"] = dp2.sum(axis=(0, 1, 2))
    k_order, hidden = params.theta.shape[0], params.theta.shape[1]
    theta2d = params.theta.reshape(-1, params.theta.shape[-1])
    grads["theta"] = (stacked.reshape(-1, stacked.shape[-1]).T @ dp2.reshape(-1, dp2.shape[-1])).reshape(
        params.theta.shape)
    d_stacked = _channel_mul(dp2, theta2d.T)
    d_basis = [d_stacked[..., k * hidden:(k + 1) * hidden] for k in range(k_order)]
    # Clenshaw recursion for sum_k T_k(L)^T d_basis[k]
    lap_t = lap.T
    b1 = b2 = None
    for k in range(k_order - 1, 0, -1):
        bk = d_basis[k].copy()
        if b1 is not None:
            bk += 2 * _node_mul(lap_t, b1)
        if b2 is not None:
            bk -= b2
        b1, b2 = bk, b1
    dh1 = d_basis[0].copy()
    if b1 is not None:
        dh1 += _node_mul(lap_t, b1)
    if b2 is not None:
        dh1 -= b2
    dp1 = dh1 * (p1 > 0)
    grads["b1"] = dp1.sum(axis=(0, 1, 2))
    grads["w1"], _ = _tconv_backward(cols1, params.w1, dp1, None)
    return grads


def forward(params: StgcnParams, window, ops) -> np.ndarray:
    """Prediction in physical units, shape ``(N, h, F)`` (or batched ``(B, N, h, F)``)."""
    lap = _scaled_lap(ops, params.dtype)
    x, single = _as_batch(window, params, lap.shape[0])
    y, _ = _forward(params, params.standardize(x), lap)
    out = params.destandardize(y)
    return out[0] if single else out


def mse_loss(truth, pred) -> float:
    """``||truth - pred||^2 / (N * tau)``; leading batch axes are averaged."""
    truth = np.asarray(truth, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if truth.shape != pred.shape or truth.ndim < 3:
        raise InvalidDimensionError(f"loss needs equal (..., N, tau, F) shapes, got {truth.shape} and {pred.shape}")
    n, tau = truth.shape[-3], truth.shape[-2]
    batch = int(np.prod(truth.shape[:-3])) if truth.ndim > 3 else 1
    return float(np.sum((truth - pred) ** 2) / (n * tau * batch))


def _batched_targets(truth, params: StgcnParams, like: np.ndarray) -> np.ndarray:
    t = truth.values if isinstance(truth, TrafficTensor) else np.asarray(truth, dtype=np.float64)
    if t.ndim == 3:
        t = t[None]
    hy = params.hyper
    expected = (like.shape[0], like.shape[1], hy.horizon, hy.num_features)
    if t.shape != expected:
        raise InvalidDimensionError(f"target shape {t.shape} does not match {expected}")
    return t


def loss_and_gradient(params: StgcnParams, window, truth, ops) -> tuple[float, dict[str, np.ndarray]]:
    """Training objective (MSE in standardised units) and its exact gradient."""
    lap = _scaled_lap(ops, params.dtype)
    x, _ = _as_batch(window, params, lap.shape[0])
    t = params.standardize(_batched_targets(truth, params, x))
    y, cache = _forward(params, params.standardize(x), lap)
    b, n, h = y.shape[:3]
    resid = y - t
    loss = float(np.sum(resid.astype(np.float64) ** 2) / (b * n * h))
    dy = (2.0 / (b * n * h)) * resid
    return loss, _backward(params, cache, dy, lap)


def backward(params: StgcnParams, window, truth, ops) -> dict[str, np.ndarray]:
    return loss_and_gradient(params, window, truth, ops)[1]


def objective(params: StgcnParams, window, truth, ops) -> float:
    lap = _scaled_lap(ops, params.dtype)
    x, _ = _as_batch(window, params, lap.shape[0])
    t = params.standardize(_batched_targets(truth, params, x))
    y, _ = _forward(params, params.standardize(x), lap)
    return mse_loss(t, y)


def _check_target(params: StgcnParams, n_nodes: int, v: int, feature: int, step: int):
    if not 0 <= v < n_nodes:
        raise InvalidArgumentError(f"node {v} outside [0, {n_nodes})")
    if not 0 <= feature < params.hyper.num_features:
        raise InvalidArgumentError(f"feature {feature} outside [0, {params.hyper.num_features})")
    if not 0 <= step < params.hyper.horizon:
        raise InvalidArgumentError(f"horizon step {step} outside [0, {params.hyper.horizon})")


def predict_node(params: StgcnParams, window, ops, v: int, feature: int, step: int = 0) -> float:
    lap = _scaled_lap(ops, params.dtype)
    _check_target(params, lap.shape[0], v, feature, step)
    return float(forward(params, window, lap)[v, step, feature])


class NodeValueFunction:
    """``predict_node`` bound to one target; the explainer's value function.

    Calling it on one window returns a float; ``batch`` evaluates a stack of
    windows at once.
    """

    def __init__(self, params: StgcnParams, ops, v: int, feature: int, step: int = 0):
        self.params = params
        self.lap = _scaled_lap(ops, params.dtype)
        _check_target(params, self.lap.shape[0], v, feature, step)
        self.v, self.feature, self.step = v, feature, step

    def batch(self, windows: np.ndarray) -> np.ndarray:
        return forward(self.params, np.asarray(windows), self.lap)[:, self.v, self.step, self.feature]

    def __call__(self, window) -> float:
        return float(forward(self.params, window, self.lap)[self.v, self.step, self.feature])


def identity_params(num_features: int, window: int) -> StgcnParams:
    """Hand-built weights whose output is the last input step (for nonnegative inputs)."""
    hyper = Hyper(cheb_order=1, kernel_width=1, hidden=num_features, window=window, horizon=1,
                  num_features=num_features)
    eye = np.eye(num_features)
    wo = np.zeros(hyper.shapes()["wo"])
    wo[window - 1, :, 0, :] = eye
    return StgcnParams(
        hyper=hyper, w1=eye[None].copy(), b1=np.zeros(num_features), theta=eye[None].copy(),
        b2=np.zeros(num_features), w3=eye[None].copy(), b3=np.zeros(num_features), wo=wo,
        bo=np.zeros((1, num_features)))


def constant_params(hyper: Hyper, bias) -> StgcnParams:
    """All-zero weights; every prediction equals ``bias`` (per feature)."""
    arrays = {name: np.zeros(shape) for name, shape in hyper.shapes().items()}
    arrays["bo"] = np.broadcast_to(np.asarray(bias, dtype=np.float64), arrays["bo"].shape).copy()
    return StgcnParams(hyper=hyper, **arrays)


def save_params(params: StgcnParams, path: str | Path) -> None:
    doc = {
        "format": PARAMS_FORMAT,
        "version": PARAMS_VERSION,
        "hyper": asdict(params.hyper),
        "precision": 32 if params.dtype == np.float32 else 64,
        "seed": params.seed,
        "scaler": {"mean": params.mean.tolist(), "std": params.std.tolist()},
        "arrays": {k: {"shape": list(v.shape), "data": v.astype(np.float64).ravel().tolist()}
                   for k, v in params.arrays().items()},
        "meta": params.meta,
    }
    try:
        Path(path).write_text(json.dumps(doc, indent=1) + "\n")
    except OSError as exc:
        raise StorageError(f"cannot write parameters to {path}: {exc}") from exc


def load_params(path: str | Path) -> StgcnParams:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise StorageError(f"cannot read parameters from {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path} is not valid JSON: {exc}") from exc
    if doc.get("format") != PARAMS_FORMAT or "version" not in doc:
        raise SchemaError(f"{path} is not a parameter file")
    if doc["version"] != PARAMS_VERSION:
        raise SchemaError(f"unsupported parameter file version {doc['version']}")
    dtype = np.float32 if doc.get("precision") == 32 else np.float64
    arrays = {k: np.asarray(v["data"], dtype=dtype).reshape(v["shape"]) for k, v in doc["arrays"].items()}
    return StgcnParams(hyper=Hyper(**doc["hyper"]), mean=doc["scaler"]["mean"], std=doc["scaler"]["std"],
                       seed=doc.get("seed", 0), meta=doc.get("meta", {}), **arrays)
