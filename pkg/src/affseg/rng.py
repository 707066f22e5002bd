"""SplitMix64 generator.

Every random draw in the package goes through this class so fixtures,
parameter initialization and minibatch sampling are bit-reproducible
from a single 64-bit seed.
"""

from __future__ import annotations

import math

import numpy as np

_MASK = 0xFFFFFFFFFFFFFFFF
_GOLDEN = 0x9E3779B97F4A7C15


class SplitMix64:
    def __init__(self, seed: int = 0) -> None:
        self.state = seed & _MASK

    def next_u64(self) -> int:
        self.state = (self.state + _GOLDEN) & _MASK
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
        return z ^ (z >> 31)

    def next_float(self) -> float:
        """Uniform double in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * (1.0 / 9007199254740992.0)

    def uniform(self, low: float, high: float) -> float:
        return low + (high - low) * self.next_float()

    def below(self, n: int) -> int:
        """Integer in [0, n) by multiply-shift (no modulo)."""
        if n <= 0:
            raise ValueError("n must be positive")
        return (self.next_u64() * n) >> 64

    def normal(self) -> float:
        # Box-Muller, one output per pair of uniforms; u1 in (0, 1].
        u1 = 1.0 - self.next_float()
        u2 = self.next_float()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def normal_array(self, shape: tuple[int, ...], scale: float = 1.0) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        out = np.fromiter((self.normal() for _ in range(n)), dtype=np.float64, count=n)
        return (out * scale).reshape(shape)

    def uniform_array(self, shape: tuple[int, ...]) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        out = np.fromiter((self.next_float() for _ in range(n)), dtype=np.float64, count=n)
        return out.reshape(shape)

    def fork(self) -> "SplitMix64":
        """Independent child stream seeded from this one."""
        return SplitMix64(self.next_u64())
