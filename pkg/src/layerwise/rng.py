"""SplitMix64 pseudo-random generator.

Used for every seeded quantity (parameter initialization, synthetic datasets,
minibatch order) so fixtures can be regenerated bit-for-bit in any language.

Algorithm (64-bit state ``s``, all arithmetic mod 2**64)::

    s = s + 0x9E3779B97F4A7C15
    z = s
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    return z ^ (z >> 31)

Doubles in [0, 1) are ``(next() >> 11) * 2**-53``. Normals use Box-Muller on
consecutive pairs ``(u1, u2)``: ``r = sqrt(-2 ln(1 - u1))`` and the pair
``(r cos 2 pi u2, r sin 2 pi u2)``.
"""
from __future__ import annotations

import numpy as np

GAMMA = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB
MASK64 = (1 << 64) - 1


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(MIX2)
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    def __init__(self, seed: int):
        self.state = int(seed) & MASK64

    def next_u64(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64) * np.uint64(GAMMA)
        states = np.uint64(self.state) + steps
        self.state = (self.state + n * GAMMA) & MASK64
        return _mix(states)

    def uniform(self, size, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        shape = (size,) if np.isscalar(size) else tuple(size)
        n = int(np.prod(shape, dtype=np.int64))
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return (low + (high - low) * u).reshape(shape)

    def normal(self, size, loc: float = 0.0, scale: float = 1.0) -> np.ndarray:
        shape = (size,) if np.isscalar(size) else tuple(size)
        n = int(np.prod(shape, dtype=np.int64))
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        theta = 2.0 * np.pi * u[:, 1]
        z = np.column_stack([r * np.cos(theta), r * np.sin(theta)]).ravel()[:n]
        return (loc + scale * z).reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def integers(self, n: int, high: int) -> np.ndarray:
        """``n`` integers uniform on ``[0, high)``."""
        return np.minimum((self.uniform(n) * high).astype(np.int64), high - 1)

    def spawn(self, key: int) -> "SplitMix64":
        """Independent child stream derived from the current state and ``key``."""
        child = _mix(np.array([(self.state ^ (key * MIX2)) & MASK64], dtype=np.uint64))
        return SplitMix64(int(child[0]))
