"""Dense float64 helpers and a splittable seeded Gaussian generator.

Every matrix in the package is a C-contiguous ``numpy.ndarray`` of dtype
float64. Randomness always flows through :class:`Rng`, whose child streams are
derived from a stable hash of a name, so the draw for ``layer3.W_u`` does not
depend on how many other tensors were initialized before it.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .errors import ConfigError


class Rng:
    """Philox-backed generator with named, order-independent child streams."""

    def __init__(self, seed: int, path: tuple[str, ...] = ()):
        if seed < 0 or seed >= 2**64:
            raise ConfigError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.path = tuple(path)
        words = [self.seed & 0xFFFFFFFF, self.seed >> 32]
        for part in self.path:
            digest = hashlib.sha256(part.encode("utf-8")).digest()
            words.extend(int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4))
        self._gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))

    def child(self, name: str) -> "Rng":
        return Rng(self.seed, self.path + (name,))

    def standard_normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def unit_vector(self, n: int) -> np.ndarray:
        v = self._gen.standard_normal(n)
        return v / np.linalg.norm(v)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={'/'.join(self.path) or '<root>'})"


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with an explicit shape check."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ConfigError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ConfigError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    return a @ b


def gaussian_fill(rng: Rng, rows: int, cols: int, std: float) -> np.ndarray:
    """I.i.d. N(0, std^2) matrix of shape (rows, cols)."""
    if not std >= 0.0:
        raise ConfigError(f"std must be non-negative, got {std}")
    if rows < 1 or cols < 1:
        raise ConfigError(f"matrix shape must be positive, got ({rows}, {cols})")
    if std == 0.0:
        return np.zeros((rows, cols))
    return rng.standard_normal((rows, cols)) * std


def fro_norm(m: np.ndarray) -> float:
    m = np.asarray(m, dtype=np.float64)
    return float(np.sqrt(np.sum(m * m)))
