"""Counter-based SplitMix64 streams keyed by (seed, purpose, index).

Every random decision in the toolkit comes from a stream derived here, so
results do not depend on call order, worker count or platform.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15

_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB


def mix64(z: int) -> int:
    """SplitMix64 finalizer on a Python int."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


def fnv1a_64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) & MASK64
    return h


def derive_key(seed: int, purpose: str, index: int = 0) -> int:
    """Fold (seed, purpose tag, index) into a 64-bit stream origin."""
    k = mix64((seed & MASK64) + GOLDEN)
    k = mix64(k ^ fnv1a_64(purpose.encode("utf-8")))
    k = mix64(k ^ ((index & MASK64) * GOLDEN & MASK64))
    return k


def _mix64_array(z: np.ndarray) -> np.ndarray:
    z = z.copy()
    z ^= z >> np.uint64(30)
    z *= np.uint64(_M1)
    z ^= z >> np.uint64(27)
    z *= np.uint64(_M2)
    z ^= z >> np.uint64(31)
    return z


class RngStream:
    """A SplitMix64 sequence. Output i is ``mix64(origin + (i+1)*GOLDEN)``.

    Because the state advance is a fixed additive counter, blocks of outputs
    can be produced vectorised without changing the sequence.
    """

    def __init__(self, seed: int, purpose: str, index: int = 0):
        self.seed = seed
        self.purpose = purpose
        self.index = index
        self._state = derive_key(seed, purpose, index)

    def next_u64(self) -> int:
        self._state = (self._state + GOLDEN) & MASK64
        return mix64(self._state)

    def u64s(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self._state) + steps * np.uint64(GOLDEN)
        self._state = (self._state + n * GOLDEN) & MASK64
        return _mix64_array(z)

    def uniform(self) -> float:
        """Uniform double in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniforms(self, n: int) -> np.ndarray:
        return (self.u64s(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))

    def below(self, bound: int) -> int:
        """Uniform integer in [0, bound) by rejection (no modulo bias)."""
        if bound <= 0:
            raise ValueError(f"bound must be positive, got {bound}")
        limit = (1 << 64) - ((1 << 64) % bound)
        while True:
            v = self.next_u64()
            if v < limit:
                return v % bound

    def integer(self, low: int, high: int) -> int:
        """Uniform integer in the closed interval [low, high]."""
        if high < low:
            raise ValueError(f"empty interval [{low}, {high}]")
        return low + self.below(high - low + 1)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of range(n)."""
        perm = np.arange(n, dtype=np.int64)
        for i in range(n - 1, 0, -1):
            j = self.below(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def sample_without_replacement(self, n: int, k: int) -> np.ndarray:
        """``k`` distinct indices from range(n) via a partial Fisher-Yates pass."""
        if not 0 <= k <= n:
            raise ValueError(f"cannot draw {k} of {n}")
        pool = np.arange(n, dtype=np.int64)
        for i in range(k):
            j = i + self.below(n - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k].copy()
