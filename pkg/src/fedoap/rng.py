"""Deterministic pseudo-randomness built on SplitMix64.

All stochastic behaviour in the package (parameter init, data
generation, batch shuffling, loss perturbation) flows through `Rng`
so that a seed fully determines a run, bit-for-bit, on every
platform.  The scalar and vectorized paths produce identical streams.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import NegativeVariance

_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_MASK = 0xFFFFFFFFFFFFFFFF

# 2**-53; maps the top 53 bits of a u64 onto a double grid
_U53 = 1.0 / (1 << 53)


def _finalize(z: int) -> int:
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK
    return z ^ (z >> 31)


class Rng:
    """SplitMix64 generator with a 64-bit state."""

    __slots__ = ("state",)

    def __init__(self, seed: int):
        self.state = seed & _MASK

    def clone(self) -> "Rng":
        return Rng(self.state)

    def next_u64(self) -> int:
        self.state = (self.state + _GOLDEN) & _MASK
        return _finalize(self.state)

    def next_u64_array(self, n: int) -> np.ndarray:
        """n outputs of `next_u64`, vectorized; advances state n times."""
        with np.errstate(over="ignore"):
            steps = np.arange(1, n + 1, dtype=np.uint64)
            z = np.uint64(self.state) + np.uint64(_GOLDEN) * steps
            z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
            z = z ^ (z >> np.uint64(31))
        self.state = (self.state + _GOLDEN * n) & _MASK
        return z

    def uniform(self) -> float:
        """Uniform draw in (0, 1]; consumes one u64."""
        return ((self.next_u64() >> 11) + 1) * _U53

    def uniform_array(self, n: int) -> np.ndarray:
        return ((self.next_u64_array(n) >> np.uint64(11)).astype(np.float64) + 1.0) * _U53

    def gaussian(self, mean: float = 0.0, variance: float = 1.0) -> float:
        """Box-Muller draw; always consumes exactly two u64s."""
        if variance < 0:
            raise NegativeVariance(f"variance must be >= 0, got {variance}")
        u1 = self.uniform()
        u2 = self.uniform()
        z = math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)
        return mean + math.sqrt(variance) * z

    def gaussian_array(self, n: int, mean: float = 0.0, variance: float = 1.0) -> np.ndarray:
        """n Box-Muller draws, two u64s each, matching the scalar stream."""
        if variance < 0:
            raise NegativeVariance(f"variance must be >= 0, got {variance}")
        u = self.uniform_array(2 * n)
        u1, u2 = u[0::2], u[1::2]
        z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
        return mean + math.sqrt(variance) * z

    def uniform_range_array(self, n: int, low: float, high: float) -> np.ndarray:
        return low + (high - low) * self.uniform_array(n)

    def randint(self, low: int, high: int) -> int:
        """Uniform integer in [low, high] via rejection-free modulo.

        Bias is < 2**-40 for the ranges used here (all far below 2**24).
        """
        span = high - low + 1
        return low + int(self.next_u64() % span)

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = int(self.next_u64() % (i + 1))
            items[i], items[j] = items[j], items[i]


def derive_seed(seed: int, *tokens: int | str) -> int:
    """Stable sub-seed from a parent seed and a path of mix-in tokens.

    Strings are folded in byte-by-byte through the SplitMix64 finalizer,
    so distinct names give decorrelated streams.
    """
    state = _finalize(seed & _MASK)
    for token in tokens:
        if isinstance(token, str):
            for b in token.encode("utf-8"):
                state = _finalize((state ^ b) + _GOLDEN & _MASK)
        else:
            state = _finalize((state ^ (token & _MASK)) + _GOLDEN & _MASK)
    return state
