"""Riemannian SGD with layerwise metrics, a plain SGD baseline and the losses."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigInvalid, DimensionMismatch, NonFinite
from .metric import (
    IDENTITY,
    LayerMetric,
    assemble_layer_metrics,
    mass_vectors,
    normalize_kind,
    riemannian_gradient,
    softmax,
)
from .modules import ParameterState, RiemannianModule, forward, layer_jacobians, parameter_gradient
from .rng import SplitMix64

MSE = "mse"
SOFTMAX_CE = "softmax_ce"
LOSS_KINDS = (MSE, SOFTMAX_CE)


def evaluate_loss(kind: str, y, target) -> tuple[float, np.ndarray]:
    """Loss value and its gradient w.r.t. ``y``.

    MSE is ``0.5 * |y - t|^2``. Softmax cross-entropy takes an integer class
    label (or a probability vector) as target. A 2-D ``y`` is a batch; the
    value is the batch mean and the gradient rows carry the ``1/B`` factor.
    """
    y = np.asarray(y, dtype=np.float64)
    batched = y.ndim == 2
    Y = y if batched else y[None, :]
    B, n_o = Y.shape
    with np.errstate(over="ignore", invalid="ignore"):
        values, grad = _loss_terms(kind, Y, target, B, n_o)
    if batched:
        return float(values.mean()), grad / B
    return float(values[0]), grad[0]


def _loss_terms(kind, Y, target, B, n_o):
    if kind == MSE:
        T = np.asarray(target, dtype=np.float64).reshape(Y.shape) if np.size(target) == Y.size else None
        if T is None:
            raise DimensionMismatch(f"target size {np.size(target)} does not match output size {Y.size}")
        R = Y - T
        values = 0.5 * np.sum(R * R, axis=1)
        grad = R
    elif kind == SOFTMAX_CE:
        t = np.asarray(target)
        if np.issubdtype(t.dtype, np.integer) and t.size == B:
            labels = t.reshape(B).astype(np.int64)
            if np.any(labels < 0) or np.any(labels >= n_o):
                raise DimensionMismatch("class label out of range")
            P = np.zeros_like(Y)
            P[np.arange(B), labels] = 1.0
        elif t.size == Y.size:
            P = np.asarray(t, dtype=np.float64).reshape(Y.shape)
        else:
            raise DimensionMismatch(f"target shape {t.shape} does not match outputs {Y.shape}")
        shift = Y.max(axis=1, keepdims=True)
        lse = np.log(np.exp(Y - shift).sum(axis=1)) + shift[:, 0]
        values = lse - np.sum(P * Y, axis=1)
        grad = softmax(Y) * P.sum(axis=1, keepdims=True) - P
    else:
        raise ValueError(f"unknown loss {kind!r}; choose from {LOSS_KINDS}")
    return values, grad


@dataclass
class OptimizerConfig:
    learning_rate: float = 0.01
    masses: float | Sequence = 1.0
    output_metric: str = IDENTITY
    epsilon: float = 1e-6
    output_diagonal: Sequence[float] | None = None
    metric_batch_cap: int | None = None
    max_steps: int = 100
    seed: int = 0
    batch_size: int | None = None
    loss: str = MSE
    pullback: bool = True
    # "simultaneous": every layer uses pre-step Jacobians; "sequential": layers
    # L..1 are updated one after another, re-linearizing after each update
    update_order: str = "simultaneous"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigInvalid("learning_rate must be positive")
        if not self.epsilon > 0:
            raise ConfigInvalid("epsilon must be positive")
        masses = [self.masses] if np.isscalar(self.masses) else list(self.masses)
        if any(not np.all(np.asarray(m, dtype=float) > 0) for m in masses):
            raise ConfigInvalid("masses must be positive")
        try:
            self.output_metric = normalize_kind(self.output_metric)
        except ValueError as exc:
            raise ConfigInvalid(str(exc)) from None
        if self.loss not in LOSS_KINDS:
            raise ConfigInvalid(f"unknown loss {self.loss!r}")
        if self.update_order not in ("simultaneous", "sequential"):
            raise ConfigInvalid(f"unknown update_order {self.update_order!r}")
        if self.metric_batch_cap is not None and self.metric_batch_cap < 1:
            raise ConfigInvalid("metric_batch_cap must be at least 1")
        if self.max_steps < 0:
            raise ConfigInvalid("max_steps must be non-negative")


@dataclass(frozen=True)
class TrainingRecord:
    step: int
    loss: float
    update_norms: tuple
    duration_ms: float = field(compare=False)


def _check_batch(graph: RiemannianModule, batch):
    X, T = batch
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise DimensionMismatch("batch inputs must be a non-empty (B, input_dim) array")
    return X, T


def _loss_and_gradient(graph, params, X, T, loss):
    Y, tape = forward(graph, params, X)
    value, dY = evaluate_loss(loss, Y, T)
    if not np.isfinite(value) or not np.all(np.isfinite(dY)):
        raise NonFinite(f"loss is not finite ({value})")
    grads = parameter_gradient(tape, dY)
    if not all(np.all(np.isfinite(g)) for g in grads):
        raise NonFinite("gradient is not finite")
    return value, Y, tape, grads


def layer_metrics(graph, params, X, config: OptimizerConfig, *, tape=None, Y=None) -> list[LayerMetric]:
    """Layer metrics of ``graph`` at ``params`` on the inputs ``X``."""
    masses = mass_vectors(graph.block_sizes, config.masses)
    if not config.pullback:
        n_o = graph.output_dim
        return [LayerMetric(a, d, np.zeros((n_o, d.size))) for a, d in enumerate(masses)]
    if tape is None:
        Y, tape = forward(graph, params, X)
    jac = [j.matrix for j in layer_jacobians(tape)]
    return assemble_layer_metrics(
        jac, Y, masses, config.output_metric, config.epsilon,
        batch_cap=config.metric_batch_cap, diagonal=config.output_diagonal,
    )


def _apply(params: ParameterState, deltas: dict[int, np.ndarray]) -> ParameterState:
    return ParameterState(tuple(
        w + deltas[a] if a in deltas else w for a, w in enumerate(params.blocks)
    ))


def riemannian_sgd_step(graph, params: ParameterState, batch, config: OptimizerConfig, step: int = 0):
    """One step of Riemannian SGD with layerwise metrics.

    Per layer: ``A = D^{-1} g``, ``S = I + K D^{-1} K^T``, ``v = S^{-1} K A`` and
    ``dw = -eta (A - D^{-1} K^T v)``.
    """
    start = time.perf_counter()
    X, T = _check_batch(graph, batch)
    eta = config.learning_rate
    value, Y, tape, grads = _loss_and_gradient(graph, params, X, T, config.loss)
    n = graph.n_layers
    deltas: dict[int, np.ndarray] = {}
    if config.update_order == "simultaneous":
        metrics = layer_metrics(graph, params, X, config, tape=tape, Y=Y)
        for alpha in reversed(range(n)):
            deltas[alpha] = -eta * riemannian_gradient(metrics[alpha], grads[alpha])
        new = _apply(params, deltas)
    else:
        new = params
        for alpha in reversed(range(n)):
            if alpha != n - 1:
                _, Y, tape, grads = _loss_and_gradient(graph, new, X, T, config.loss)
            metrics = layer_metrics(graph, new, X, config, tape=tape, Y=Y)
            deltas[alpha] = -eta * riemannian_gradient(metrics[alpha], grads[alpha])
            new = _apply(new, {alpha: deltas[alpha]})
    norms = tuple(float(np.linalg.norm(deltas[a])) for a in range(n))
    if not all(np.all(np.isfinite(b)) for b in new.blocks):
        raise NonFinite("parameters became non-finite")
    return new, TrainingRecord(step, value, norms, 1e3 * (time.perf_counter() - start))


def sgd_baseline_step(graph, params: ParameterState, batch, learning_rate: float, loss: str = MSE, step: int = 0):
    """Plain gradient step ``dw = -eta * grad``."""
    start = time.perf_counter()
    X, T = _check_batch(graph, batch)
    value, _, _, grads = _loss_and_gradient(graph, params, X, T, loss)
    deltas = {a: -learning_rate * g for a, g in enumerate(grads)}
    new = _apply(params, deltas)
    if not all(np.all(np.isfinite(b)) for b in new.blocks):
        raise NonFinite("parameters became non-finite")
    norms = tuple(float(np.linalg.norm(deltas[a])) for a in range(graph.n_layers))
    return new, TrainingRecord(step, value, norms, 1e3 * (time.perf_counter() - start))


def batch_loss(graph, params, batch, loss: str = MSE) -> float:
    X, T = batch
    Y, _ = forward(graph, params, np.asarray(X, dtype=np.float64))
    return evaluate_loss(loss, Y, T)[0]


def minibatches(n_samples: int, batch_size: int | None, seed: int):
    """Endless stream of index arrays; reshuffled each epoch from the seed."""
    if batch_size is None or batch_size >= n_samples:
        full = np.arange(n_samples)
        while True:
            yield full
    root = SplitMix64(seed)
    epoch = 0
    while True:
        order = root.spawn(epoch).permutation(n_samples)
        for i in range(0, n_samples - batch_size + 1, batch_size):
            yield order[i:i + batch_size]
        epoch += 1


def train(
    graph,
    params: ParameterState,
    dataset,
    config: OptimizerConfig,
    method: str = "riemannian",
    callback: Callable[[TrainingRecord], None] | None = None,
):
    """Run ``config.max_steps`` steps. Returns ``(params, records)``.

    On a non-finite step the raised ``NonFinite`` carries ``records`` and
    ``params`` from the last valid step.
    """
    X, T = dataset
    X = np.asarray(X, dtype=np.float64)
    T = np.asarray(T)
    records: list[TrainingRecord] = []
    batches = minibatches(X.shape[0], config.batch_size, config.seed)
    for step in range(config.max_steps):
        idx = next(batches)
        batch = (X[idx], T[idx])
        try:
            if method == "riemannian":
                params, rec = riemannian_sgd_step(graph, params, batch, config, step)
            elif method == "sgd":
                params, rec = sgd_baseline_step(graph, params, batch, config.learning_rate, config.loss, step)
            else:
                raise ConfigInvalid(f"unknown method {method!r}")
        except NonFinite as exc:
            exc.records = records
            exc.params = params
            raise
        records.append(rec)
        if callback is not None:
            callback(rec)
    return params, records
