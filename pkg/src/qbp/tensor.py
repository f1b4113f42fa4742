"""Dense matrices, seeded random streams and the two matrix-product kernels.

Matrices are plain C-contiguous numpy arrays (float32 unless a caller
explicitly asks for float64, which the gradient checks do). Ternary matrices
are int8 arrays holding only -1, 0 and +1.

Both kernels accumulate every output entry over the inner index in ascending
order, so a product computed by sign accumulation is bit-identical to the
multiply-based product of the same ternary matrix cast to float.
"""

from __future__ import annotations

from typing import Any

import numba
import numpy as np

FLOAT = np.float32


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def as_matrix(a: Any, dtype=None) -> np.ndarray:
    """Coerce ``a`` to a C-contiguous 2-D float array (float32 by default)."""
    if dtype is None:
        dtype = a.dtype if isinstance(a, np.ndarray) and a.dtype in (np.float32, np.float64) else FLOAT
    m = np.ascontiguousarray(a, dtype=dtype)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def as_ternary(w: Any) -> np.ndarray:
    t = np.ascontiguousarray(w)
    if t.ndim != 2:
        raise ShapeError(f"expected a 2-D ternary matrix, got shape {t.shape}")
    if not np.isin(t, (-1, 0, 1)).all():
        raise ValueError("ternary matrix entries must be -1, 0 or +1")
    return t.astype(np.int8, copy=False)


@numba.njit(cache=True)
def _matmul_kernel(a, b, out):
    n, inner = a.shape
    m = b.shape[1]
    for i in range(n):
        for k in range(inner):
            aik = a[i, k]
            for j in range(m):
                out[i, j] += aik * b[k, j]


@numba.njit(cache=True)
def _sign_accumulate_kernel(w, x, out):
    n, inner = w.shape
    m = x.shape[1]
    for i in range(n):
        for k in range(inner):
            s = w[i, k]
            if s > 0:
                for j in range(m):
                    out[i, j] += x[k, j]
            elif s < 0:
                for j in range(m):
                    out[i, j] -= x[k, j]


def _check_inner(a_shape, b_shape, what: str) -> None:
    if a_shape[1] != b_shape[0]:
        raise ShapeError(f"{what}: inner dimensions differ, {a_shape} x {b_shape}")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Multiply-based product ``a @ b`` with ascending inner-index accumulation."""
    a = as_matrix(a)
    b = as_matrix(b, dtype=a.dtype)
    _check_inner(a.shape, b.shape, "matmul")
    out = np.zeros((a.shape[0], b.shape[1]), dtype=a.dtype)
    _matmul_kernel(a, b, out)
    return out


def sign_accumulate_matmul(w: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Multiplication-free product of a ternary matrix with a real matrix.

    Each partial product is +x, -x or skipped, so the only arithmetic is
    addition and subtraction.
    """
    w = as_ternary(w)
    x = as_matrix(x)
    _check_inner(w.shape, x.shape, "sign_accumulate_matmul")
    out = np.zeros((w.shape[0], x.shape[1]), dtype=x.dtype)
    _sign_accumulate_kernel(w, x, out)
    return out


class Prng:
    """Seeded uniform stream backed by numpy's PCG64.

    ``stream`` selects an independent sub-stream of the same seed, so each
    layer can own a generator derived from ``(seed, layer index)``.
    """

    def __init__(self, seed: int, stream: tuple[int, ...] | int = ()):
        if isinstance(stream, int):
            stream = (stream,)
        self.seed = int(seed)
        self.stream = tuple(int(s) for s in stream)
        seq = np.random.SeedSequence(self.seed, spawn_key=self.stream)
        self._gen = np.random.Generator(np.random.PCG64(seq))

    def uniform(self) -> float:
        return float(self._gen.random())

    def uniforms(self, shape) -> np.ndarray:
        """Draw float64 uniforms in [0, 1), filled in row-major order."""
        return self._gen.random(shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    @property
    def state(self) -> dict:
        return self._gen.bit_generator.state

    @state.setter
    def state(self, value: dict) -> None:
        self._gen.bit_generator.state = value


def uniform(prng: Prng) -> float:
    return prng.uniform()
