from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError, EmptyDataError, InvalidArgumentError, InvalidDimensionError
from .graph import LatticeGraph, SpectralOperators, spectral_operators
from .predictor import Hyper, StgcnParams, forward, init_params, loss_and_gradient, mse_loss
from .tensor import TrafficTensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 100
    batch: int = 32
    seed: int = 0
    precision: int = 64
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise InvalidArgumentError("learning_rate must be non-negative")
        if self.epochs < 1 or self.batch < 1:
            raise InvalidArgumentError("epochs and batch must be >= 1")
        if self.precision not in (32, 64):
            raise InvalidArgumentError("precision must be 32 or 64")
        if self.optimizer not in ("adam", "sgd"):
            raise InvalidArgumentError(f"unknown optimizer {self.optimizer!r}")

    @property
    def dtype(self):
        return np.float32 if self.precision == 32 else np.float64


@dataclass
class TrainResult:
    params: StgcnParams
    losses: list[float] = field(default_factory=list)


def make_windows(tensor: TrafficTensor | np.ndarray, window: int, horizon: int = 1,
                 start: int = 0, stop: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Sliding ``(input window, next-horizon target)`` pairs.

    Window ``i`` covers steps ``i .. i+window-1`` and its target the following
    ``horizon`` steps. ``start``/``stop`` select a range of window indices.
    """
    values = tensor.values if isinstance(tensor, TrafficTensor) else np.asarray(tensor, dtype=np.float64)
    count = values.shape[1] - window - horizon + 1
    if count < 1:
        raise EmptyDataError(f"{values.shape[1]} steps cannot hold a window of {window} plus horizon {horizon}")
    stop = count if stop is None else min(stop, count)
    idx = np.arange(start, stop)
    steps = idx[:, None] + np.arange(window)[None, :]
    targets = idx[:, None] + window + np.arange(horizon)[None, :]
    x = values[:, steps, :].transpose(1, 0, 2, 3)
    y = values[:, targets, :].transpose(1, 0, 2, 3)
    return np.ascontiguousarray(x), np.ascontiguousarray(y)


def persistence_forecast(windows: np.ndarray, horizon: int = 1) -> np.ndarray:
    """Repeat the last observed step for every horizon step."""
    last = windows[..., -1:, :]
    return np.repeat(last, horizon, axis=-2)


def standardized_mse(params: StgcnParams, truth: np.ndarray, pred: np.ndarray) -> float:
    return mse_loss((truth - params.mean) / params.std, (pred - params.mean) / params.std)


def fit_scaler(windows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    flat = windows.reshape(-1, windows.shape[-1])
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    return mean, np.where(std > 1e-12, std, 1.0)


def _stack(data) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(data, tuple) and len(data) == 2 and isinstance(data[0], np.ndarray) and data[0].ndim == 4:
        return data
    pairs = list(data)
    if not pairs:
        raise EmptyDataError("no training pairs")
    x = np.stack([np.asarray(getattr(w, "values", w), dtype=np.float64) for w, _ in pairs])
    y = np.stack([np.asarray(getattr(t, "values", t), dtype=np.float64) for _, t in pairs])
    return x, y


def fit(data, graph: LatticeGraph | SpectralOperators, hyper: Hyper, config: TrainConfig,
        callback=None) -> TrainResult:
    """Train from scratch; ``data`` is ``(windows, targets)`` arrays or a list of pairs.

    ``callback(epoch, loss)`` is invoked after each epoch.
    """
    x, y = _stack(data)
    if x.shape[0] == 0:
        raise EmptyDataError("no training pairs")
    if x.shape[0] != y.shape[0]:
        raise InvalidDimensionError("windows and targets differ in count")
    ops = graph if isinstance(graph, SpectralOperators) else spectral_operators(graph)
    if x.shape[1:] != (ops.num_nodes, hyper.window, hyper.num_features):
        raise InvalidDimensionError(f"windows {x.shape[1:]} do not match graph/hyper")
    if y.shape[1:] != (ops.num_nodes, hyper.horizon, hyper.num_features):
        raise InvalidDimensionError(f"targets {y.shape[1:]} do not match graph/hyper")

    dtype = config.dtype
    mean, std = fit_scaler(x)
    params = init_params(hyper, seed=config.seed, dtype=dtype, mean=mean, std=std)
    lap = ops.scaled_laplacian.astype(dtype)
    rng = np.random.default_rng(config.seed)
    m = {k: np.zeros_like(v) for k, v in params.arrays().items()}
    v = {k: np.zeros_like(v) for k, v in params.arrays().items()}
    lr = config.learning_rate
    step = 0
    losses = []
    n = x.shape[0]
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch):
            idx = np.sort(order[start:start + config.batch])
            # overflow surfaces as a non-finite loss, reported below
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grads = loss_and_gradient(params, x[idx], y[idx], lap)
            if not np.isfinite(loss):
                raise DivergenceError(f"loss became non-finite in epoch {epoch}", epoch)
            total += loss * len(idx)
            step += 1
            arrays = params.arrays()
            if config.optimizer == "sgd":
                updated = {k: arrays[k] - dtype(lr) * grads[k] for k in arrays}
            else:
                updated = {}
                c1 = 1.0 - config.beta1 ** step
                c2 = 1.0 - config.beta2 ** step
                for k in arrays:
                    g = grads[k]
                    m[k] = config.beta1 * m[k] + (1 - config.beta1) * g
                    v[k] = config.beta2 * v[k] + (1 - config.beta2) * g * g
                    delta = lr * (m[k] / c1) / (np.sqrt(v[k] / c2) + config.eps)
                    updated[k] = (arrays[k] - delta).astype(dtype, copy=False)
            params = params.with_arrays(updated)
        epoch_loss = total / n
        if not np.isfinite(epoch_loss):
            raise DivergenceError(f"loss became non-finite in epoch {epoch}", epoch)
        losses.append(epoch_loss)
        log.debug("epoch %d loss %.6g", epoch, epoch_loss)
        if callback is not None:
            callback(epoch, epoch_loss)
    params.meta = {"epochs": config.epochs, "learning_rate": lr, "optimizer": config.optimizer,
                   "batch": config.batch, "final_train_loss": losses[-1]}
    return TrainResult(params, losses)


def train(data, graph: LatticeGraph | SpectralOperators, config: TrainConfig,
          hyper: Hyper | None = None) -> StgcnParams:
    return fit(data, graph, hyper or Hyper(), config).params


def evaluate(params: StgcnParams, windows: np.ndarray, targets: np.ndarray, ops,
             chunk: int = 256) -> tuple[float, float]:
    """Standardised MSE of the model and of the persistence forecast."""
    if len(windows) == 0:
        return float("nan"), float("nan")
    preds = np.concatenate([forward(params, windows[i:i + chunk], ops) for i in range(0, len(windows), chunk)])
    model = standardized_mse(params, targets, preds)
    naive = standardized_mse(params, targets, persistence_forecast(windows, params.hyper.horizon))
    return model, naive
