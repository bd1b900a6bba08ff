"""Counter-based random streams.

Every consumer of randomness gets its own ``Rng(seed, stream)``.  The
underlying generator is Philox-4x64 keyed by ``(seed, stream)``, so a draw
depends only on the key and the position within that stream, never on
what other streams did before it.
"""
from __future__ import annotations

import zlib

import numpy as np

UNIFORM_EPS = 1e-12
_MASK64 = (1 << 64) - 1


def stream_id(label: str | int) -> int:
    """Map a stream label to a stable 64-bit id."""
    if isinstance(label, int):
        return label & _MASK64
    raw = label.encode("utf-8")
    return (zlib.crc32(raw) << 32 | zlib.adler32(raw)) & _MASK64


class Rng:
    def __init__(self, seed: int, stream: int | str = 0):
        self.seed = int(seed) & _MASK64
        self.stream = stream_id(stream)
        bitgen = np.random.Philox(key=np.array([self.seed, self.stream], dtype=np.uint64))
        self._gen = np.random.Generator(bitgen)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, stream={self.stream})"

    def spawn(self, label: int | str) -> "Rng":
        """Child stream; depends only on this stream's key and ``label``."""
        return Rng(self.seed, (self.stream * 0x9E3779B97F4A7C15 + stream_id(label) + 1) & _MASK64)

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return low + (high - low) * self._gen.random(shape)

    def open_uniform(self, shape=()) -> np.ndarray:
        """Uniform on (0, 1), clamped to [1e-12, 1 - 1e-12]."""
        return np.clip(self._gen.random(shape), UNIFORM_EPS, 1.0 - UNIFORM_EPS)

    def normal(self, shape=(), scale: float = 1.0) -> np.ndarray:
        return scale * self._gen.standard_normal(shape)

    def integers(self, low: int, high: int, shape=None):
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, p=None):
        return int(self._gen.choice(n, p=p))
