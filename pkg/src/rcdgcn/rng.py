"""SplitMix64, used for every random draw in the package.

The generator is counter based: draw ``k`` (0-based) of a stream seeded with
``s`` is ``mix(s + (k + 1) * GOLDEN)`` where ``mix`` is the SplitMix64
finalizer. That makes whole blocks of draws a single vectorized numpy
expression and keeps streams reproducible across implementations.

Uniform doubles take the top 53 bits: ``(x >> 11) * 2**-53``. Gaussian
draws use Box-Muller on consecutive uniform pairs ``(u1, u2)`` with
``u1`` mapped to ``1 - u1`` so the log is finite:
``z = sqrt(-2 ln(1 - u1)) * cos(2 pi u2)``.
"""
from __future__ import annotations

import numpy as np

GOLDEN = 0x9E3779B97F4A7C15
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1


def mix64(z: np.ndarray) -> np.ndarray:
    z = z.astype(np.uint64, copy=True)
    z ^= z >> np.uint64(30)
    z *= _M1
    z ^= z >> np.uint64(27)
    z *= _M2
    z ^= z >> np.uint64(31)
    return z


def _fnv1a(name: str) -> int:
    h = 0xCBF29CE484222325
    for b in name.encode("utf-8"):
        h ^= b
        h = (h * 0x100000001B3) & _MASK
    return h


def derive_seed(seed: int, name: str) -> int:
    """Named sub-seed, e.g. ``derive_seed(run_seed, "init")``."""
    z = np.array([(int(seed) ^ _fnv1a(name)) & _MASK], dtype=np.uint64)
    return int(mix64(z)[0])


class SplitMix64:
    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK
        self.counter = 0

    def next_u64(self, n: int) -> np.ndarray:
        k = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            states = np.uint64(self.seed) + k * np.uint64(GOLDEN)
        return mix64(states)

    def uniform(self, n: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
        return low + (high - low) * u

    def normal(self, n: int) -> np.ndarray:
        u = self.uniform(2 * n).reshape(n, 2)
        return np.sqrt(-2.0 * np.log1p(-u[:, 0])) * np.cos(2.0 * np.pi * u[:, 1])

    def integers(self, n: int, low: int, high: int) -> np.ndarray:
        """Uniform integers in ``[low, high)`` (floor of a scaled uniform)."""
        return low + np.floor(self.uniform(n) * (high - low)).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")
