"""Counter-based random streams.

Each draw is taken from a Philox-4x64 generator keyed by the stream seed
with its 256-bit counter set to ``draw_index << 128``. A stream is therefore
fully described by ``(seed, counter)``; replaying from the same pair gives
the same values, and child streams are derived by hashing the parent seed
with a label so they never overlap with the parent.
"""
from __future__ import annotations

import hashlib

import numpy as np

from .tensor import get_default_dtype

_MASK64 = (1 << 64) - 1


def derive_seed(seed: int, label) -> int:
    digest = hashlib.blake2b(f"{int(seed) & _MASK64}/{label}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class RngStream:
    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & _MASK64
        self.counter = int(counter)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, counter={self.counter})"

    def _next(self) -> np.random.Generator:
        gen = np.random.Generator(np.random.Philox(key=self.seed, counter=self.counter << 128))
        self.counter += 1
        return gen

    def child(self, label) -> RngStream:
        return RngStream(derive_seed(self.seed, label))

    def normal(self, shape, dtype=None) -> np.ndarray:
        out = self._next().standard_normal(size=shape, dtype=np.float64)
        return out.astype(dtype or get_default_dtype())

    def uniform(self, shape=None, low: float = 0.0, high: float = 1.0):
        return self._next().uniform(low, high, size=shape)

    def integers(self, low: int, high: int, size=None):
        """Integers in ``[low, high)``."""
        return self._next().integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._next().permutation(n)

    def choice(self, options, size=None):
        idx = self._next().integers(0, len(options), size=size)
        if size is None:
            return options[int(idx)]
        return [options[int(i)] for i in idx]
