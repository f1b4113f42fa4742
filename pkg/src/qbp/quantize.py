"""Stochastic weight sampling, clipping, power-of-two quantization and shifts.

``shift_mul`` scales a float32 by a signed power of two by editing its
exponent field and sign bit directly. Results round to nearest-even when they
fall into the subnormal range, which makes them bit-identical to the IEEE
product ``a * (sign * 2**exponent)`` everywhere short of overflow. Overflow
saturates to the largest finite float32 and is reported to the caller.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .tensor import FLOAT, Prng, ShapeError, as_matrix

MANTISSA_BITS = 24
_SQRT_HALF = float(np.sqrt(0.5))


@dataclass(frozen=True)
class ShiftBudget:
    """Largest allowed right (2**-k) and left (2**k) shifts."""

    right: int = 3
    left: int = 4

    def __post_init__(self):
        for name in ("right", "left"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or not 0 <= v <= MANTISSA_BITS:
                raise ValueError(f"shift budget {name}={v!r} must be an integer in [0, {MANTISSA_BITS}]")

    @classmethod
    def symmetric(cls, bits: int) -> "ShiftBudget":
        return cls(right=bits, left=bits)


DEFAULT_BUDGET = ShiftBudget()


@dataclass(frozen=True)
class Pow2Value:
    sign: int
    exponent: int = 0

    def __post_init__(self):
        if self.sign not in (-1, 0, 1):
            raise ValueError(f"sign must be -1, 0 or +1, got {self.sign}")

    def dequantize(self) -> float:
        if self.sign == 0:
            return 0.0
        return float(self.sign * 2.0 ** self.exponent)


@dataclass(frozen=True)
class QuantizedMatrix:
    """Entry-wise power-of-two quantization of a matrix."""

    sign: np.ndarray  # int8
    exponent: np.ndarray  # int8
    budget: ShiftBudget

    @property
    def shape(self):
        return self.sign.shape

    def dequantize(self) -> np.ndarray:
        mag = np.ldexp(np.ones(self.sign.shape, dtype=FLOAT), self.exponent.astype(np.int32))
        return (self.sign.astype(FLOAT) * mag).astype(FLOAT)

    def __getitem__(self, idx) -> Pow2Value:
        s = int(self.sign[idx])
        return Pow2Value(s, int(self.exponent[idx]) if s else 0)


def _check_unit_interval(wbar) -> None:
    w = np.asarray(wbar)
    if not np.all((w >= -1.0) & (w <= 1.0)):
        raise ValueError("weights must lie in [-1, 1] before sampling; clip them first")


def clip(w):
    """Force weights into [-1, 1]; works on scalars and arrays."""
    if isinstance(w, np.ndarray):
        return np.clip(w, -1.0, 1.0).astype(w.dtype, copy=False)
    return min(1.0, max(-1.0, float(w)))


def binarize(wbar: float, prng: Prng) -> int:
    """Return +1 with probability (wbar + 1) / 2, else -1."""
    _check_unit_interval(wbar)
    return 1 if prng.uniform() < (float(wbar) + 1.0) / 2.0 else -1


def ternarize(wbar: float, prng: Prng) -> int:
    _check_unit_interval(wbar)
    w = float(wbar)
    u = prng.uniform()
    if w > 0.0:
        return 1 if u < w else 0
    return -1 if u < -w else 0


def sample_binary(wbar: np.ndarray, prng: Prng) -> np.ndarray:
    """Matrix form of :func:`binarize`; one uniform per entry, row-major."""
    w = np.asarray(wbar, dtype=np.float64)
    _check_unit_interval(w)
    u = prng.uniforms(w.shape)
    return np.where(u < (w + 1.0) / 2.0, 1, -1).astype(np.int8)


def sample_ternary(wbar: np.ndarray, prng: Prng) -> np.ndarray:
    w = np.asarray(wbar, dtype=np.float64)
    _check_unit_interval(w)
    u = prng.uniforms(w.shape)
    pos = (w > 0.0) & (u < w)
    neg = (w <= 0.0) & (u < -w)
    return (pos.astype(np.int8) - neg.astype(np.int8)).astype(np.int8)


def log2_round(x: np.ndarray) -> np.ndarray:
    """Round-half-to-even of log2|x| for nonzero finite x, without clamping.

    Uses x = m * 2**e with m in [0.5, 1): log2|x| rounds to e when
    m >= sqrt(1/2) and to e - 1 otherwise. A tie would need m == sqrt(1/2)
    exactly, which no binary float can hold.
    """
    m, e = np.frexp(np.abs(np.asarray(x)))
    return np.where(m >= _SQRT_HALF, e, e - 1).astype(np.int32)


def pow2_quantize(x: float, budget: ShiftBudget = DEFAULT_BUDGET) -> Pow2Value:
    x = float(x)
    if not np.isfinite(x):
        raise ValueError(f"cannot quantize non-finite value {x}")
    if x == 0.0:
        return Pow2Value(0, 0)
    e = int(log2_round(np.float64(x)))
    return Pow2Value(1 if x > 0 else -1, min(max(e, -budget.right), budget.left))


def pow2_quantize_matrix(x: np.ndarray, budget: ShiftBudget = DEFAULT_BUDGET) -> QuantizedMatrix:
    x = np.asarray(x)
    if not np.isfinite(x).all():
        raise ValueError("cannot quantize non-finite values")
    sign = np.sign(x).astype(np.int8)
    exp = np.clip(log2_round(np.where(sign != 0, x, 1.0)), -budget.right, budget.left)
    exp = np.where(sign != 0, exp, 0).astype(np.int8)
    return QuantizedMatrix(sign, exp, budget)


@numba.njit(cache=True)
def _shift_bits(bits, sign, exponent):
    """Scale float32 bit pattern ``bits`` by sign * 2**exponent.

    Returns (new bit pattern, saturated flag).
    """
    b = np.int64(bits)
    sgn = b & 0x80000000
    if sign == 0:
        return sgn, False
    if sign < 0:
        sgn ^= 0x80000000
    ex = (b >> 23) & 0xFF
    man = b & 0x7FFFFF
    if ex == 0xFF:
        return sgn | (b & 0x7FFFFFFF), False
    if ex == 0:
        if man == 0:
            return sgn, False
        ex = 1
        while (man & 0x800000) == 0:
            man <<= 1
            ex -= 1
        man &= 0x7FFFFF
    new = ex + exponent
    if new >= 0xFF:
        return sgn | 0x7F7FFFFF, True
    if new >= 1:
        return sgn | (new << 23) | man, False
    # subnormal result: shift the full significand right, round half to even
    shift = 1 - new
    if shift > MANTISSA_BITS:
        return sgn, False
    full = man | 0x800000
    q = full >> shift
    rem = full & ((np.int64(1) << shift) - 1)
    half = np.int64(1) << (shift - 1)
    if rem > half or (rem == half and (q & 1) == 1):
        q += 1
    return sgn | q, False


@numba.njit(cache=True)
def _shift_mul_kernel(a_bits, sign, exponent, out_bits):
    saturated = 0
    for i in range(a_bits.shape[0]):
        r, sat = _shift_bits(a_bits[i], sign[i], exponent[i])
        out_bits[i] = r
        if sat:
            saturated += 1
    return saturated


@numba.njit(cache=True)
def _shift_outer_kernel(g_bits, code_t, lo, hi, out):
    # out[i, j] = sum_b g[i, b] * sign[j, b] * 2**exp[j, b], ascending b.
    # code_t (B x N) indexes the shifted copies of g[i, b]: 0 is zero, then
    # (exp - lo) * 2 + 1 for negative and + 2 for positive signs. Each
    # distinct shift of g[i, b] is computed once and reused across j.
    # Zero codes are skipped: out starts at +0.0 and adding a signed zero
    # to a sum that started at +0.0 never changes its bits.
    m, batch = g_bits.shape
    n = code_t.shape[1]
    n_codes = 2 * (hi - lo + 1) + 1
    table_bits = np.zeros(n_codes, dtype=np.uint32)
    table = table_bits.view(np.float32)
    used = np.zeros((batch, n_codes), dtype=np.int64)
    starts = np.zeros(batch + 1, dtype=np.int64)
    for b in range(batch):
        for j in range(n):
            used[b, code_t[b, j]] += 1
        starts[b + 1] = starts[b] + n - used[b, 0]
    cols = np.empty(starts[batch], dtype=np.int64)
    codes = np.empty(starts[batch], dtype=np.int64)
    for b in range(batch):
        p = starts[b]
        for j in range(n):
            c = code_t[b, j]
            if c != 0:
                cols[p] = j
                codes[p] = c
                p += 1
    saturated = 0
    for i in range(m):
        for b in range(batch):
            if starts[b + 1] == starts[b]:
                continue
            gb = g_bits[i, b]
            for e in range(lo, hi + 1):
                for k in range(2):
                    c = (e - lo) * 2 + 1 + k
                    if used[b, c] == 0:
                        continue
                    r, sat = _shift_bits(gb, 2 * k - 1, e)
                    table_bits[c] = r
                    if sat:
                        saturated += used[b, c]
            for p in range(starts[b], starts[b + 1]):
                out[i, cols[p]] += table[codes[p]]
    return saturated


def _float32_bits(a) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.float32).view(np.uint32)


def shift_mul_array(a: np.ndarray, sign: np.ndarray, exponent: np.ndarray) -> tuple[np.ndarray, int]:
    """Element-wise shift multiply; returns (values, number of saturations)."""
    a = np.asarray(a, dtype=np.float32)
    shape = a.shape
    bits = _float32_bits(a.ravel())
    s = np.ascontiguousarray(np.broadcast_to(sign, shape).ravel(), dtype=np.int8)
    e = np.ascontiguousarray(np.broadcast_to(exponent, shape).ravel(), dtype=np.int32)
    out = np.empty(bits.shape, dtype=np.uint32)
    n_sat = _shift_mul_kernel(bits, s, e, out)
    return out.view(np.float32).reshape(shape), int(n_sat)


def shift_mul(a: float, q: Pow2Value, counter=None) -> float:
    """Return ``a * q.sign * 2**q.exponent`` computed as an exponent shift.

    The shift and any saturation event are recorded on ``counter`` when one
    is given.
    """
    out, n_sat = shift_mul_array(np.array([a], dtype=np.float32), np.array([q.sign]), np.array([q.exponent]))
    if counter is not None:
        counter.record("shifts", 1)
        counter.record("saturations", n_sat)
    return float(out[0])


def shift_outer(g: np.ndarray, xq: QuantizedMatrix) -> tuple[np.ndarray, int]:
    """Outer-product update ``g @ dequant(xq).T`` using only shifts and adds.

    ``g`` is M x B, ``xq`` is N x B; the result is M x N float32, each entry
    accumulated over the batch index in ascending order.
    """
    g = as_matrix(g, dtype=np.float32)
    if g.shape[1] != xq.shape[1]:
        raise ShapeError(f"shift_outer: batch sizes differ, {g.shape} vs {xq.shape}")
    out = np.zeros((g.shape[0], xq.shape[0]), dtype=np.float32)
    lo, hi = -xq.budget.right, xq.budget.left
    if xq.sign.size and (xq.exponent.min() < lo or xq.exponent.max() > hi):
        raise ValueError("quantized exponents fall outside their shift budget")
    code = np.where(xq.sign == 0, 0, (xq.exponent.astype(np.int32) - lo) * 2 + 1 + (xq.sign > 0))
    n_sat = _shift_outer_kernel(_float32_bits(g), np.ascontiguousarray(code.T, dtype=np.int32), lo, hi, out)
    return out, int(n_sat)
