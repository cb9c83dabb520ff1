"""Deterministic helpers shared by the corruption and evaluation pipelines.

Mask selection is pinned to splitmix64 so that identical (sequence, ratio,
strategy, seed) inputs yield identical masks on every platform. Weight
initialisation elsewhere uses numpy's seeded PCG64, which is documented but
not cross-implementation portable; masks are.
"""

from __future__ import annotations

import math

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15


class SplitMix64:
    """The splitmix64 generator: 64-bit state, one mix per output."""

    __slots__ = ("state",)

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + _GAMMA) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def next_below(self, n: int) -> int:
        """Uniform draw in [0, n) as next_u64() % n (n up to 2**32 here,
        so the modulo bias is far below anything observable)."""
        if n <= 0:
            raise ValueError(f"next_below needs n > 0, got {n}")
        return self.next_u64() % n


def mix_seed(*parts: int) -> int:
    """Collapse several integers into one 64-bit seed, order-sensitively."""
    acc = 0x8C62F7B1E453A2D9
    for p in parts:
        acc = (acc ^ (p & _MASK64)) & _MASK64
        acc = ((acc + _GAMMA) & _MASK64)
        z = acc
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        acc = z ^ (z >> 31)
    return acc


def round_half_up(x: float) -> int:
    """floor(x + 0.5) on the raw double; ties round up."""
    return int(math.floor(x + 0.5))


def partial_fisher_yates(items: list[int], k: int, rng: SplitMix64) -> list[int]:
    """First k entries of a Fisher-Yates shuffle of items, in draw order.

    Consumes exactly min(k, len(items)) draws; items is copied, not mutated.
    """
    a = list(items)
    n = len(a)
    k = min(k, n)
    for i in range(k):
        j = i + rng.next_below(n - i)
        a[i], a[j] = a[j], a[i]
    return a[:k]
