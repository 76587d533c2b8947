"""Small dense-math helpers shared by the engine.

Matrices are plain ``float64`` numpy arrays. Everything here is a pure
function of its inputs so the callers can share arrays between threads.
"""

from __future__ import annotations

import warnings

import numpy as np

__all__ = [
    "ShapeError",
    "ParameterError",
    "Rng",
    "as_matrix",
    "matmul",
    "softmax_rows",
    "causal_mask",
    "top_r_indices",
    "gaussian_fill",
]


class ShapeError(ValueError):
    """Operand shapes do not line up."""


class ParameterError(ValueError):
    """A scalar parameter is outside its legal range."""


def as_matrix(data, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """Coerce ``data`` into a finite 2-D float64 array.

    ``rows``/``cols`` reshape a flat row-major buffer.
    """
    arr = np.asarray(data, dtype=np.float64)
    if rows is not None and cols is not None:
        if arr.size != rows * cols:
            raise ShapeError(f"expected {rows * cols} values for {rows}x{cols}, got {arr.size}")
        arr = arr.reshape(rows, cols)
    if arr.ndim != 2:
        raise ShapeError(f"matrix must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ParameterError("matrix entries must be finite")
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def causal_mask(rows: int, cols: int, offset: int = 0) -> np.ndarray:
    """Boolean visibility mask: row ``i`` sees columns ``j <= i + offset``.

    ``offset`` is the number of leading columns every row may attend to
    (cached keys in front of the current window).
    """
    return np.arange(cols)[None, :] <= (np.arange(rows)[:, None] + offset)


def softmax_rows(a: np.ndarray, causal: bool = False, offset: int = 0) -> np.ndarray:
    """Row-wise softmax over the last axis with optional causal masking.

    Masked entries (and ``-inf`` inputs) come out as exact zeros. A row with
    nothing visible yields all zeros and raises a ``RuntimeWarning`` instead
    of producing NaN.
    """
    x = np.array(a, dtype=np.float64, copy=True)
    if x.ndim < 2:
        raise ShapeError("softmax_rows needs at least a 2-D array")
    if causal:
        np.copyto(x, -np.inf, where=~causal_mask(x.shape[-2], x.shape[-1], offset))
    row_max = np.max(x, axis=-1, keepdims=True)
    dead = ~np.isfinite(row_max)
    if dead.any():
        row_max[dead] = 0.0
    x -= row_max
    np.exp(x, out=x)
    total = x.sum(axis=-1, keepdims=True)
    if dead.any():
        warnings.warn("softmax_rows: fully masked row(s) returned as zeros", RuntimeWarning, stacklevel=2)
        total[dead] = 1.0
    x /= total
    return x


def top_r_indices(v, r: int) -> np.ndarray:
    """Indices of the ``r`` largest entries, best first.

    Ties go to the smaller index, so the result is fully deterministic.
    """
    v = np.asarray(v, dtype=np.float64).ravel()
    r = int(r)
    if r < 0 or r > v.size:
        raise ParameterError(f"r={r} outside [0, {v.size}]")
    # stable sort on the negated scores keeps equal scores in index order
    order = np.argsort(-v, kind="stable")
    return order[:r].astype(np.int64)


class Rng:
    """Seeded generator with a fixed algorithm (PCG64 + numpy's ziggurat normals).

    The bit stream depends only on ``seed``, never on platform or thread.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFF_FFFF_FFFF_FFFF
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def uniform(self, shape=None) -> np.ndarray:
        return self._gen.random(shape)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def choice(self, n: int, size: int, replace: bool = True, p=None) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace, p=p)

    def spawn(self, salt: int) -> "Rng":
        """Independent child stream keyed by ``salt``."""
        return Rng((self.seed * 0x9E3779B97F4A7C15 + int(salt) + 1) & 0xFFFF_FFFF_FFFF_FFFF)


def gaussian_fill(rng: Rng, rows: int, cols: int, scale: float) -> np.ndarray:
    if scale < 0:
        raise ParameterError("scale must be non-negative")
    return rng.normal((rows, cols)) * float(scale)
