"""Seeded random streams.

Bits come from PCG64, whose output sequence is fixed by its published
algorithm. Uniforms use numpy's 53-bit conversion; normals are produced by
the Box-Muller transform of those uniforms rather than numpy's ziggurat, so
the mapping from uniforms to normals is explicit.
"""
from __future__ import annotations

from collections.abc import Sequence

import numpy as np


class RngState:
    """Deterministic random stream keyed by one or more unsigned integers."""

    def __init__(self, *key: int):
        if not key:
            raise ValueError("at least one seed component is required")
        for k in key:
            if int(k) < 0:
                raise ValueError(f"seed components must be unsigned, got {k}")
        self.key = tuple(int(k) for k in key)
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(self.key))))

    def spawn(self, *key: int) -> "RngState":
        """Independent child stream; depends only on this stream's key and ``key``."""
        return RngState(*self.key, *key)

    def uniform(self, shape: Sequence[int] | int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        u = self._gen.random(_shape(shape))
        if low == 0.0 and high == 1.0:
            return u
        return low + (high - low) * u

    def normal(self, shape: Sequence[int] | int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        shape = _shape(shape)
        size = int(np.prod(shape))
        half = (size + 1) // 2
        u1 = self._gen.random(half)
        u2 = self._gen.random(half)
        # 1 - u1 lies in (0, 1], keeping the log finite
        r = np.sqrt(-2.0 * np.log1p(-u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:size]
        return (mean + std * z).reshape(shape)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice_index(self, probs: Sequence[float]) -> int:
        """Index drawn with the given probabilities (inverse CDF of one uniform)."""
        u = float(self._gen.random())
        acc = 0.0
        for i, p in enumerate(probs):
            acc += p
            if u < acc:
                return i
        # rounding left acc slightly under 1; fall back to the last non-zero bin
        return max(i for i, p in enumerate(probs) if p > 0)


def seeded_rng(seed: int, *extra: int) -> RngState:
    return RngState(seed, *extra)


def rng_uniform(state: RngState, shape) -> np.ndarray:
    return state.uniform(shape)


def rng_normal(state: RngState, shape) -> np.ndarray:
    return state.normal(shape)


def _shape(shape) -> tuple[int, ...]:
    if isinstance(shape, (int, np.integer)):
        return (int(shape),)
    return tuple(int(s) for s in shape)
