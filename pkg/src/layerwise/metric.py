"""Layerwise metrics ``G = D + K^T K`` and their Woodbury inverse.

``D`` is a positive diagonal mass matrix and ``K = L_o J`` the output-metric
factor pulled back through the layer Jacobian. ``G`` is never formed: applying
``G^{-1}`` only factors the ``r x r`` inner matrix ``S = I + K D^{-1} K^T``
where ``r`` is the number of rows of ``K``.

For a batch of ``B`` samples the per-sample blocks ``L_o(y_b) J_b`` are stacked
and scaled by ``1/sqrt(B)``, so ``K^T K`` is the batch average of the per-sample
pullback metrics.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from .errors import DimensionMismatch, NonFinite, NotPositiveDefinite
from .linalg import cholesky_solve, cholesky_upper

IDENTITY = "identity"
GAUSS_NEWTON = "gauss_newton_softmax_ce"
USER_DIAGONAL = "user_diagonal"
OUTPUT_METRIC_KINDS = (IDENTITY, GAUSS_NEWTON, USER_DIAGONAL)

_ALIASES = {
    "identity": IDENTITY,
    "gaussnewtonsoftmaxce": GAUSS_NEWTON,
    "gauss_newton_softmax_ce": GAUSS_NEWTON,
    "gauss_newton": GAUSS_NEWTON,
    "userdiagonal": USER_DIAGONAL,
    "user_diagonal": USER_DIAGONAL,
    "diagonal": USER_DIAGONAL,
}


def normalize_kind(kind: str) -> str:
    try:
        return _ALIASES[kind.strip().lower()]
    except KeyError:
        raise ValueError(f"unknown output metric {kind!r}; choose from {OUTPUT_METRIC_KINDS}") from None


def softmax(y):
    y = np.asarray(y, dtype=np.float64)
    z = np.exp(y - y.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class OutputMetric:
    kind: str
    epsilon: float
    factor: np.ndarray

    @property
    def matrix(self) -> np.ndarray:
        return self.factor.T @ self.factor


def output_metric_matrix(kind: str, y, epsilon: float, diagonal=None) -> np.ndarray:
    kind = normalize_kind(kind)
    y = np.asarray(y, dtype=np.float64)
    n_o = y.shape[-1]
    if kind == IDENTITY:
        return np.eye(n_o)
    if not epsilon > 0:
        raise ValueError("epsilon must be positive for non-identity output metrics")
    if kind == GAUSS_NEWTON:
        p = softmax(y)
        return np.diag(p) - np.outer(p, p) + epsilon * np.eye(n_o)
    if diagonal is None:
        raise ValueError("user_diagonal output metric needs a diagonal")
    diagonal = np.broadcast_to(np.asarray(diagonal, dtype=np.float64), (n_o,))
    if np.any(diagonal < 0):
        raise NotPositiveDefinite("user diagonal has negative entries")
    return np.diag(diagonal + epsilon)


def build_output_metric(kind: str, y, epsilon: float = 1e-6, diagonal=None) -> OutputMetric:
    """Output-space metric ``M(y)`` at one output vector, with its upper factor."""
    kind = normalize_kind(kind)
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 1:
        raise DimensionMismatch("build_output_metric takes a single output vector")
    if kind == IDENTITY:
        return OutputMetric(kind, epsilon, np.eye(y.size))
    m = output_metric_matrix(kind, y, epsilon, diagonal)
    return OutputMetric(kind, epsilon, cholesky_upper(m))


def output_factors(kind: str, Y, epsilon: float, diagonal=None) -> np.ndarray:
    """Upper factors for every row of ``Y``; shape ``(B, n_o, n_o)``."""
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    kind = normalize_kind(kind)
    if kind == IDENTITY:
        return np.broadcast_to(np.eye(Y.shape[1]), (Y.shape[0], Y.shape[1], Y.shape[1]))
    return np.stack([build_output_metric(kind, y, epsilon, diagonal).factor for y in Y])


@dataclass(frozen=True)
class LayerMetric:
    """Implicit ``G = diag(mass) + K^T K`` for one layer."""

    layer: int
    mass: np.ndarray
    scaled_jacobian: np.ndarray

    def __post_init__(self):
        mass = np.asarray(self.mass, dtype=np.float64)
        K = np.asarray(self.scaled_jacobian, dtype=np.float64)
        if K.ndim != 2 or mass.shape != (K.shape[1],):
            raise DimensionMismatch(f"mass {mass.shape} incompatible with scaled Jacobian {K.shape}")
        if not np.all(mass > 0):
            raise NotPositiveDefinite("mass entries must be positive")
        object.__setattr__(self, "mass", mass)
        object.__setattr__(self, "scaled_jacobian", K)

    @property
    def n_params(self) -> int:
        return self.mass.size

    @cached_property
    def inner_factor(self) -> np.ndarray:
        """Upper Cholesky factor of ``S = I + K D^{-1} K^T``; computed once per metric."""
        K = self.scaled_jacobian
        return cholesky_upper(np.eye(K.shape[0]) + (K / self.mass) @ K.T)

    def dense(self) -> np.ndarray:
        """Materialized ``G``. Only meant for small oracle checks."""
        K = self.scaled_jacobian
        return np.diag(self.mass) + K.T @ K


def woodbury_apply_inverse(metric: LayerMetric, v) -> np.ndarray:
    """``(D + K^T K)^{-1} v`` via ``D^{-1} v - D^{-1} K^T S^{-1} K D^{-1} v``.

    ``v`` may be a vector ``(n,)`` or a matrix ``(n, r)`` of column vectors.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.shape[0] != metric.n_params:
        raise DimensionMismatch(f"vector of length {v.shape[0]} for a layer with {metric.n_params} parameters")
    if not np.all(np.isfinite(v)):
        raise NonFinite("vector has non-finite entries")
    if metric.n_params == 0:
        return v.copy()
    dinv = 1.0 / metric.mass
    K = metric.scaled_jacobian
    scale = dinv if v.ndim == 1 else dinv[:, None]
    a = v * scale
    u = cholesky_solve(metric.inner_factor, K @ a)
    return a - scale * (K.T @ u)


def riemannian_gradient(metric: LayerMetric, g) -> np.ndarray:
    """Metric-preconditioned gradient ``G^{-1} g``."""
    return woodbury_apply_inverse(metric, g)


def mass_vectors(block_sizes: Sequence[int], masses) -> list[np.ndarray]:
    """Expand a scalar, a per-layer scalar list, or per-layer vectors into mass diagonals."""
    if np.isscalar(masses):
        masses = [masses] * len(block_sizes)
    if len(masses) != len(block_sizes):
        raise DimensionMismatch(f"{len(masses)} masses for {len(block_sizes)} layers")
    out = []
    for n, m in zip(block_sizes, masses):
        d = np.broadcast_to(np.asarray(m, dtype=np.float64), (n,)).copy()
        if not np.all(d > 0):
            raise ValueError("masses must be positive")
        out.append(d)
    return out


def scaled_jacobian(J, factors) -> np.ndarray:
    """Stack ``L_o(y_b) J_b / sqrt(B)`` over the batch: ``(B, n_o, n) -> (B * n_o, n)``."""
    J = np.asarray(J)
    B, n_o, n = J.shape
    K = np.matmul(factors, J) / np.sqrt(B)
    return K.reshape(B * n_o, n)


def assemble_layer_metrics(
    jacobians: Sequence[np.ndarray],
    outputs,
    masses: Sequence[np.ndarray],
    kind: str = IDENTITY,
    epsilon: float = 1e-6,
    *,
    pullback: bool = True,
    batch_cap: int | None = None,
    diagonal=None,
) -> list[LayerMetric]:
    """Layer metrics for one batch.

    ``jacobians[alpha]`` has shape ``(B, n_o, n_alpha)``. At most ``batch_cap``
    leading samples enter the pullback term. With ``pullback=False`` every
    ``K`` is the zero matrix.
    """
    Y = np.atleast_2d(np.asarray(outputs, dtype=np.float64))
    B = Y.shape[0]
    c = B if batch_cap is None else max(1, min(int(batch_cap), B))
    factors = output_factors(kind, Y[:c], epsilon, diagonal) if pullback else None
    metrics = []
    for alpha, (J, d) in enumerate(zip(jacobians, masses)):
        J = np.asarray(J)
        if pullback:
            K = scaled_jacobian(J[:c], factors)
        else:
            K = np.zeros((J.shape[1], J.shape[2]))
        metrics.append(LayerMetric(alpha, d, K))
    return metrics


def block_diagonal_dense(metrics: Sequence[LayerMetric]) -> np.ndarray:
    """``blockdiag(G^(alpha))`` materialized. Oracle use only."""
    n = sum(m.n_params for m in metrics)
    G = np.zeros((n, n))
    i = 0
    for m in metrics:
        j = i + m.n_params
        G[i:j, i:j] = m.dense()
        i = j
    return G
