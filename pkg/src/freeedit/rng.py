"""SplitMix64 pseudo-random generator.

All randomness in the package flows through this generator so datasets and
training runs are reproducible from an integer seed, and the full generator
state is one 64-bit integer that fits in a checkpoint trailer.
"""

from __future__ import annotations

import math

import numpy as np

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB


def _mix_array(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    def __init__(self, seed: int = 0):
        self.state = int(seed) & _MASK

    def next_u64(self) -> int:
        self.state = (self.state + _GOLDEN) & _MASK
        z = self.state
        z = ((z ^ (z >> 30)) * _M1) & _MASK
        z = ((z ^ (z >> 27)) * _M2) & _MASK
        return z ^ (z >> 31)

    def u64(self, n: int) -> np.ndarray:
        """The next ``n`` outputs, identical to ``n`` calls of :meth:`next_u64`."""
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * np.uint64(_GOLDEN)
            out = _mix_array(z)
        self.state = (self.state + n * _GOLDEN) & _MASK
        return out

    def random(self, size=None):
        """Uniform doubles in [0, 1) built from the top 53 bits."""
        if size is None:
            return (self.next_u64() >> 11) * (1.0 / (1 << 53))
        n = int(np.prod(size))
        vals = (self.u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        return vals.reshape(size)

    def uniform(self, lo=0.0, hi=1.0, size=None):
        return lo + (hi - lo) * self.random(size)

    def integers(self, lo: int, hi: int, size=None):
        """Integers in [lo, hi)."""
        if hi <= lo:
            raise ValueError(f"empty integer range [{lo}, {hi})")
        r = self.random(size)
        if size is None:
            return lo + min(int(r * (hi - lo)), hi - lo - 1)
        return lo + np.minimum((r * (hi - lo)).astype(np.int64), hi - lo - 1)

    def normal(self, size):
        n = int(np.prod(size))
        u = self.random(2 * ((n + 1) // 2)).reshape(2, -1)
        r = np.sqrt(-2.0 * np.log1p(-u[0]))
        z = np.concatenate([r * np.cos(2 * math.pi * u[1]), r * np.sin(2 * math.pi * u[1])])
        return z[:n].reshape(size)

    def choice(self, n: int, k: int) -> list[int]:
        """``k`` distinct indices from ``range(n)`` (partial Fisher-Yates)."""
        if k > n:
            raise ValueError(f"cannot choose {k} of {n} without replacement")
        pool = list(range(n))
        for i in range(k):
            j = self.integers(i, n)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k]
