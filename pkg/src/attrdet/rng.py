"""splitmix64 / xoshiro256** generators.

Both follow the reference algorithms bit for bit, so any implementation of
them reproduces the same synthetic datasets. ``xoshiro256**`` state is
seeded with four consecutive splitmix64 outputs.
"""
from __future__ import annotations

import math

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15


def _mix64(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        return _mix64(self.state)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


class Xoshiro256:
    """xoshiro256** with a few convenience draws on top of ``next_u64``."""

    def __init__(self, seed: int = 0, state: tuple[int, int, int, int] | None = None):
        if state is None:
            sm = SplitMix64(seed)
            state = tuple(sm.next_u64() for _ in range(4))
        if not any(state):
            raise ValueError("xoshiro256** state must not be all zero")
        self.s = [int(v) & MASK64 for v in state]

    def next_u64(self) -> int:
        s = self.s
        result = (_rotl((s[1] * 5) & MASK64, 7) * 9) & MASK64
        t = (s[1] << 17) & MASK64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def random(self) -> float:
        """Uniform double in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.random()

    def integers(self, lo: int, hi: int) -> int:
        """Uniform integer in [lo, hi] (multiply-shift reduction)."""
        n = hi - lo + 1
        if n <= 0:
            raise ValueError(f"empty range [{lo}, {hi}]")
        return lo + ((self.next_u64() * n) >> 64)

    def bernoulli(self, p: float) -> bool:
        return self.random() < p

    def normal(self) -> float:
        u1 = 1.0 - self.random()
        u2 = self.random()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def choice(self, seq):
        return seq[self.integers(0, len(seq) - 1)]

    def shuffle(self, items: list) -> list:
        for i in range(len(items) - 1, 0, -1):
            j = self.integers(0, i)
            items[i], items[j] = items[j], items[i]
        return items

    def split(self) -> "Xoshiro256":
        """Independent child stream seeded from this one."""
        return Xoshiro256(self.next_u64())


def derive_seed(base: int, index: int) -> int:
    """Seed for item ``index`` of a collection generated from ``base``."""
    return _mix64((base * GOLDEN_GAMMA + index + 1) & MASK64)


def hash_uniform(seed: int, n: int) -> np.ndarray:
    """``n`` uniform [0, 1) doubles from counter-mode splitmix64 (vectorised)."""
    with np.errstate(over="ignore"):
        z = np.uint64(seed & MASK64) + (np.arange(1, n + 1, dtype=np.uint64) * np.uint64(GOLDEN_GAMMA))
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        z = z ^ (z >> np.uint64(31))
    return (z >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
