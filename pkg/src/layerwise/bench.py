"""Timing of one layer update: Woodbury versus dense inversion."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .metric import LayerMetric, woodbury_apply_inverse
from .rng import SplitMix64


@dataclass(frozen=True)
class BenchRow:
    n_alpha: int
    d: int
    woodbury_ms: float
    dense_ms: float

    @property
    def speedup(self) -> float:
        return self.dense_ms / self.woodbury_ms if self.woodbury_ms > 0 else float("inf")


def _best_ms(fn, repeats: int) -> float:
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return 1e3 * best


def time_layer_update(n_alpha: int, d: int, repeats: int = 5, seed: int = 0) -> BenchRow:
    """Best-of-``repeats`` time to compute ``G^{-1} g`` for ``G = D + K^T K``.

    Both sides start from ``D``, ``K`` and ``g``: the Woodbury side factors the
    ``d x d`` inner matrix, the dense side forms ``G`` and calls a general solver.
    """
    rng = SplitMix64(seed)
    mass = rng.uniform(n_alpha, 0.5, 2.0)
    K = rng.normal((d, n_alpha)) / np.sqrt(n_alpha)
    g = rng.normal(n_alpha)

    def woodbury():
        return woodbury_apply_inverse(LayerMetric(0, mass, K), g)

    def dense():
        return np.linalg.solve(np.diag(mass) + K.T @ K, g)

    woodbury()
    dense()
    return BenchRow(n_alpha, d, _best_ms(woodbury, repeats), _best_ms(dense, repeats))


def fit_exponent(n, t) -> float:
    """Slope of ``log t`` against ``log n`` by least squares."""
    n = np.log(np.asarray(n, dtype=np.float64))
    t = np.log(np.asarray(t, dtype=np.float64))
    if n.size < 2:
        return float("nan")
    return float(np.polyfit(n, t, 1)[0])


def crossover(rows: list[BenchRow]) -> int | None:
    """Smallest ``n_alpha`` (per sweep order) where Woodbury beats dense."""
    for r in sorted(rows, key=lambda r: (r.d, r.n_alpha)):
        if r.woodbury_ms < r.dense_ms:
            return r.n_alpha
    return None
