"""Counter-based seeded random streams.

Built on numpy's Philox bit generator, whose output is a pure function of
(key, counter) and therefore identical on every platform. Normal variates
use Box-Muller on top of the uniform stream so the transform is pinned here
and not delegated to a library sampler whose algorithm could change.
"""
from __future__ import annotations

import numpy as np

from .tensor import Tensor


class Rng:
    def __init__(self, seed: int = 0, stream: tuple[int, ...] = ()):
        if seed < 0:
            raise ValueError("seed must be a non-negative 64-bit integer")
        self.seed = int(seed)
        self.stream = tuple(int(s) for s in stream)
        key = np.random.SeedSequence([self.seed, *self.stream]).generate_state(2, np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def child(self, *index: int) -> "Rng":
        """Independent stream determined only by (seed, stream, index)."""
        return Rng(self.seed, self.stream + tuple(index))

    def uniform_array(self, lo, hi, shape=()) -> np.ndarray:
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        if np.any(lo >= hi):
            raise ValueError(f"uniform needs lo < hi, got lo={lo}, hi={hi}")
        u = self._gen.random(shape)
        return lo + (hi - lo) * u

    def normal_array(self, mean=0.0, std=1.0, shape=()) -> np.ndarray:
        std = np.asarray(std, dtype=np.float64)
        if np.any(std < 0):
            raise ValueError("normal needs std >= 0")
        n = int(np.prod(shape, dtype=np.int64))
        m = (n + 1) // 2
        u1 = self._gen.random(m)
        u2 = self._gen.random(m)
        r = np.sqrt(-2.0 * np.log1p(-u1))  # 1 - u1 lies in (0, 1]
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])[:n]
        return mean + std * z.reshape(shape)

    def integers(self, n: int, size=None) -> np.ndarray:
        return self._gen.integers(0, n, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def rng_uniform(rng: Rng, lo, hi, shape=()) -> Tensor:
    return Tensor(rng.uniform_array(lo, hi, shape))


def rng_normal(rng: Rng, mean=0.0, std=1.0, shape=()) -> Tensor:
    return Tensor(rng.normal_array(mean, std, shape))
