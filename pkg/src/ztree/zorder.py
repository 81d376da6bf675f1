"""Floating-point z-order: msb decomposition, comparator, sort and splitters.

Coordinates are compared at full floating-point precision.  Each value is
split into sign, unbiased exponent and an integer mantissa with its leading
bit set (subnormals are renormalized), and two vectors are ordered along
the dimension whose most significant differing bit is highest.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba as nb
import numpy as np

from .errors import ValidationError
from .points import as_positions

# Below every attainable bit position; used for "no differing bit" and e(0).
LEVEL_MIN = -(1 << 30)


@dataclass(frozen=True)
class FloatFormat:
    mant_bits: int   # explicit fraction bits
    bias: int
    emax: int        # one larger than the largest exponent
    uint: type
    exp_mask: int


FLOAT64 = FloatFormat(52, 1023, 1024, np.uint64, 0x7FF)
FLOAT32 = FloatFormat(23, 127, 128, np.uint32, 0xFF)


def float_format(dtype) -> FloatFormat:
    dtype = np.dtype(dtype)
    if dtype == np.float64:
        return FLOAT64
    if dtype == np.float32:
        return FLOAT32
    raise ValidationError(f"unsupported float dtype {dtype}")


@dataclass(frozen=True)
class FloatDecomposition:
    """``value == sign * mantissa * 2**(exponent - mant_bits)``.

    ``mantissa`` has bit ``mant_bits`` set for every nonzero value, so
    ``mantissa / 2**mant_bits`` lies in [1, 2).  Zero decomposes to
    ``(+1, LEVEL_MIN, 0)``.
    """

    sign: int
    exponent: int
    mantissa: int
    mant_bits: int

    def value(self) -> float:
        if self.mantissa == 0:
            return 0.0
        return float(self.sign) * float(np.ldexp(float(self.mantissa), self.exponent - self.mant_bits))


def decompose_array(x: np.ndarray):
    """Vectorized decomposition of a float array.

    Returns ``(sign, exponent, mantissa)`` arrays with sign in {0, 1}
    (1 = negative), matching shapes.
    """
    x = np.asarray(x)
    fmt = float_format(x.dtype)
    bits = np.ascontiguousarray(x).view(fmt.uint).astype(np.uint64)
    nbits = 64 if fmt is FLOAT64 else 32
    sign = ((bits >> np.uint64(nbits - 1)) & np.uint64(1)).astype(np.int8)
    ebits = ((bits >> np.uint64(fmt.mant_bits)) & np.uint64(fmt.exp_mask)).astype(np.int64)
    frac = (bits & np.uint64((1 << fmt.mant_bits) - 1)).astype(np.int64)

    exponent = ebits - fmt.bias
    mantissa = frac | (1 << fmt.mant_bits)

    sub = (ebits == 0) & (frac != 0)
    if np.any(sub):
        # frac < 2**52 is exact in float64, so frexp yields its bit length
        blen = np.frexp(frac[sub].astype(np.float64))[1].astype(np.int64)
        shift = fmt.mant_bits + 1 - blen
        mantissa[sub] = frac[sub] << shift
        exponent[sub] = 1 - fmt.bias - shift

    zero = (ebits == 0) & (frac == 0)
    exponent[zero] = LEVEL_MIN
    mantissa[zero] = 0
    sign[zero] = 0
    return sign, exponent, mantissa


def decompose(value: float, dtype=np.float64) -> FloatDecomposition:
    fmt = float_format(dtype)
    arr = np.array([value], dtype=dtype)
    if not np.isfinite(arr[0]):
        raise ValidationError("cannot decompose NaN/Inf")
    s, e, m = decompose_array(arr)
    return FloatDecomposition(-1 if s[0] else 1, int(e[0]), int(m[0]), fmt.mant_bits)


def msb_fixed(a_bits: int, b_bits: int, point_position: int = 0) -> int:
    """Power of two of the highest differing bit of two fixed-point numbers.

    >>> msb_fixed(0b101010010101, 0b101001011011, 4)
    3
    """
    x = int(a_bits) ^ int(b_bits)
    if x == 0:
        return LEVEL_MIN
    return x.bit_length() - 1 - point_position


def msb(a: float, b: float, dtype=np.float64) -> int:
    """Most significant differing bit of two floats viewed as fixed point."""
    fmt = float_format(dtype)
    v = np.array([a, b], dtype=dtype)
    if not np.all(np.isfinite(v)):
        raise ValidationError("msb of NaN/Inf")
    s, e, m = decompose_array(v + v.dtype.type(0))
    return int(_msb(s[0], e[0], m[0], s[1], e[1], m[1], fmt.mant_bits, fmt.emax))


def ordered_keys(x: np.ndarray) -> np.ndarray:
    """Signed integers whose order matches the float order, one per coordinate.

    The magnitude bits of negative values are flipped.  For two keys of the
    same sign their xor equals the xor of the raw float bits, so the most
    significant differing bit can be read from the keys directly; a
    negative xor flags a sign mismatch.
    """
    x = np.ascontiguousarray(x)
    if x.dtype == np.float64:
        i = x.view(np.int64)
        return np.where(i < 0, i ^ np.int64(0x7FFFFFFFFFFFFFFF), i)
    if x.dtype == np.float32:
        i = x.view(np.int32)
        return np.where(i < 0, i ^ np.int32(0x7FFFFFFF), i).astype(np.int64)
    raise ValidationError(f"unsupported float dtype {x.dtype}")


# ----------------------------------------------------------------------------
# numba kernels


@nb.njit(cache=True, inline="always")
def _bitlen(x):
    n = 0
    if x >= (1 << 32):
        x >>= 32
        n += 32
    if x >= (1 << 16):
        x >>= 16
        n += 16
    if x >= (1 << 8):
        x >>= 8
        n += 8
    if x >= (1 << 4):
        x >>= 4
        n += 4
    if x >= 4:
        x >>= 2
        n += 2
    if x >= 2:
        x >>= 1
        n += 1
    if x >= 1:
        n += 1
    return n


@nb.njit(cache=True, inline="always")
def _msb(sa, ea, ma, sb, eb, mb, mant_bits, emax):
    """Three-case rule on decomposed values (zero has exponent LEVEL_MIN)."""
    if sa != sb:
        return emax
    if ea != eb:
        return max(ea, eb)
    x = ma ^ mb
    if x == 0:
        return LEVEL_MIN
    return ea + _bitlen(x) - 1 - mant_bits


@nb.njit(cache=True, inline="always")
def _msb_key(ka, kb, mant_bits, bias, emax, mag_mask):
    """The same rule evaluated on ordered keys.

    Exponent field 0 (zero, subnormals) shares the fixed-point scale of
    field 1, which reproduces the renormalized result.
    """
    x = ka ^ kb
    if x < 0:
        return emax
    if x == 0:
        return LEVEL_MIN
    ma = ka if ka >= 0 else (~ka) & mag_mask
    mb = kb if kb >= 0 else (~kb) & mag_mask
    ea = ma >> mant_bits
    eb = mb >> mant_bits
    if ea != eb:
        return max(ea, eb) - bias
    return max(ea, 1) - bias + _bitlen(x) - 1 - mant_bits


@nb.njit(cache=True, inline="always")
def _deciding(A, i, B, j, mant_bits, bias, emax, mag_mask):
    """(msb, k) for rows A[i], B[j]; k = first dimension attaining the max."""
    best = LEVEL_MIN
    k = 0
    for c in range(A.shape[1]):
        m = _msb_key(A[i, c], B[j, c], mant_bits, bias, emax, mag_mask)
        if m > best:
            best = m
            k = c
    return best, k


@nb.njit(cache=True, inline="always")
def _row_less(A, i, B, j, mant_bits, bias, emax, mag_mask):
    best, k = _deciding(A, i, B, j, mant_bits, bias, emax, mag_mask)
    if best == LEVEL_MIN:
        return False
    return A[i, k] < B[j, k]


@nb.njit(cache=True)
def _z_less(K, i, j, mant_bits, bias, emax, mag_mask):
    return _row_less(K, i, K, j, mant_bits, bias, emax, mag_mask)


@nb.njit(cache=True)
def _morton_level(K, i, j, mant_bits, bias, emax, mag_mask):
    best, k = _deciding(K, i, K, j, mant_bits, bias, emax, mag_mask)
    if best == LEVEL_MIN:
        return LEVEL_MIN
    return (best + 1) * K.shape[1] - k


@nb.njit(cache=True)
def _merge_sort(K, mant_bits, bias, emax, mag_mask):
    """Stable bottom-up merge sort moving the key rows along with the indices."""
    n, d = K.shape
    a = np.arange(n)
    if n < 2:
        return a
    A = K.copy()
    B = np.empty_like(A)
    b = np.empty_like(a)
    run = 16
    # insertion-sort short runs (stable)
    row = np.empty(d, dtype=K.dtype)
    tmp = np.empty((1, d), dtype=K.dtype)
    for lo in range(0, n, run):
        hi = min(lo + run, n)
        for t in range(lo + 1, hi):
            v = a[t]
            tmp[0] = A[t]
            u = t - 1
            while u >= lo and _row_less(tmp, 0, A, u, mant_bits, bias, emax, mag_mask):
                a[u + 1] = a[u]
                A[u + 1] = A[u]
                u -= 1
            a[u + 1] = v
            A[u + 1] = tmp[0]
    width = run
    while width < n:
        for lo in range(0, n, 2 * width):
            mid = min(lo + width, n)
            hi = min(lo + 2 * width, n)
            if mid >= hi or not _row_less(A, mid, A, mid - 1, mant_bits, bias, emax, mag_mask):
                # already ordered
                for t in range(lo, hi):
                    b[t] = a[t]
                    B[t] = A[t]
                continue
            i = lo
            j = mid
            o = lo
            while i < mid and j < hi:
                # take right only when strictly smaller: keeps stability
                if _row_less(A, j, A, i, mant_bits, bias, emax, mag_mask):
                    b[o] = a[j]
                    B[o] = A[j]
                    j += 1
                else:
                    b[o] = a[i]
                    B[o] = A[i]
                    i += 1
                o += 1
            while i < mid:
                b[o] = a[i]
                B[o] = A[i]
                i += 1
                o += 1
            while j < hi:
                b[o] = a[j]
                B[o] = A[j]
                j += 1
                o += 1
        a, b = b, a
        A, B = B, A
        width *= 2
    return a


@nb.njit(cache=True)
def _upper_bound(K, SK, mant_bits, bias, emax, mag_mask):
    """For each row of K: number of splitter rows s with not (x < s)."""
    n = K.shape[0]
    m = SK.shape[0]
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        lo = 0
        hi = m
        while lo < hi:
            mid = (lo + hi) // 2
            if _row_less(K, i, SK, mid, mant_bits, bias, emax, mag_mask):
                hi = mid
            else:
                lo = mid + 1
        out[i] = lo
    return out


# ----------------------------------------------------------------------------
# public API


class ZKeys:
    """Ordered integer keys of an (N, d) array, ready for the kernels."""

    def __init__(self, x: np.ndarray):
        self.x = x
        self.fmt = float_format(x.dtype)
        self.K = ordered_keys(x)
        nbits = 64 if self.fmt is FLOAT64 else 32
        self.args = (self.fmt.mant_bits, self.fmt.bias, self.fmt.emax, (1 << (nbits - 1)) - 1)

    def less(self, i: int, j: int) -> bool:
        return bool(_z_less(self.K, i, j, *self.args))

    def level(self, i: int, j: int) -> int:
        return int(_morton_level(self.K, i, j, *self.args))


def z_less(p, q) -> bool:
    """Strict z-order comparison of two equal-length vectors."""
    x = as_positions(np.stack([np.atleast_1d(p), np.atleast_1d(q)]))
    return ZKeys(x).less(0, 1)


def z_sort(points) -> np.ndarray:
    """Stable z-order permutation of an (N, d) array or PointSet."""
    x = points.positions if hasattr(points, "positions") else as_positions(points)
    if x.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    k = ZKeys(x)
    return _merge_sort(k.K, *k.args)


def sample_splitters(points, n_ranks: int, n_samp: int = 1000, seed: int = 0) -> np.ndarray:
    """Pick ``n_ranks - 1`` z-order splitters from a seeded uniform sample.

    Returns an (n_ranks - 1, d) array of splitter positions.
    """
    x = points.positions if hasattr(points, "positions") else as_positions(points)
    if n_ranks < 1:
        raise ValidationError("n_ranks must be >= 1")
    if x.shape[0] < n_ranks:
        raise ValidationError(f"{x.shape[0]} points cannot fill {n_ranks} ranks")
    if n_ranks == 1:
        return np.zeros((0, x.shape[1]), dtype=x.dtype)
    if n_samp < n_ranks:
        raise ValidationError("n_samp must be >= n_ranks")
    rng = np.random.default_rng(seed)
    sample = x[rng.integers(0, x.shape[0], size=n_samp)]
    return splitters_from_sample(sample, n_ranks)


def splitters_from_sample(sample: np.ndarray, n_ranks: int) -> np.ndarray:
    """Evenly spaced order statistics of a z-sorted sample."""
    sample = sample[z_sort(sample)]
    picks = (np.arange(1, n_ranks) * len(sample)) // n_ranks
    return np.ascontiguousarray(sample[picks])


def splitter_ranks(points, splitters: np.ndarray) -> np.ndarray:
    """Destination rank of each point: number of splitters at or below it."""
    x = points.positions if hasattr(points, "positions") else as_positions(points)
    if len(splitters) == 0:
        return np.zeros(x.shape[0], dtype=np.int64)
    splitters = np.ascontiguousarray(splitters, dtype=x.dtype)
    k = ZKeys(x)
    return _upper_bound(k.K, ZKeys(splitters).K, *k.args)
