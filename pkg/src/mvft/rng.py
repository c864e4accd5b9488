"""Counter-based SplitMix64 generator.

Draw ``i`` (1-based) of a stream with seed ``s`` is ``mix(s + i * GAMMA)``
with the standard SplitMix64 finalizer, all in wrapping 64-bit arithmetic.
Because draws depend only on (seed, counter), sequences are identical on
every platform and can be produced in vectorized blocks.

Derived floats: ``uniform`` takes the top 53 bits, ``normal`` uses
Box-Muller on pairs of uniforms, ``permutation`` argsorts fresh 64-bit keys.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_FORK = 0xD1B54A32D192ED03


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


class SeededRng:
    def __init__(self, seed: int) -> None:
        self.seed = int(seed) & MASK64
        self.counter = 0

    def next_u64(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            return _mix(np.uint64(self.seed) + idx * np.uint64(GAMMA))

    def uniform(self, n: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        unit = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        return low + (high - low) * unit

    def normal(self, n: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        pairs = (n + 1) // 2
        u1 = 1.0 - self.uniform(pairs)  # (0, 1]
        u2 = self.uniform(pairs)
        radius = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([radius * np.cos(2 * np.pi * u2), radius * np.sin(2 * np.pi * u2)])
        return mean + std * z[:n]

    def integers(self, n: int, high: int) -> np.ndarray:
        """Integers in [0, high)."""
        return np.minimum((self.uniform(n) * high).astype(np.int64), high - 1)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.next_u64(n), kind="stable")

    def fork(self, key: int) -> "SeededRng":
        """Independent child stream; same (seed, key) always gives the same child."""
        with np.errstate(over="ignore"):
            child = _mix(np.array([(self.seed + (int(key) + 1) * _FORK) & MASK64], dtype=np.uint64))
        return SeededRng(int(child[0]))
