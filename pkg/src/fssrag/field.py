"""Prime-field arithmetic and fixed-point encoding.

Scalars are plain Python ints in ``[0, p)``; vectors are ``uint64`` arrays.
Signed reals use centered representatives in ``[-(p//2), p//2]`` scaled by
``2**f``.  For bitwise comparison a value is moved to *offset* form
``(x + p//2) mod p`` which makes signed order coincide with unsigned order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import ConfigurationError, FieldRangeError
from .prg import Randomness, as_rng

DEFAULT_P = 2**64 - 59
DEFAULT_F = 32
DEFAULT_N = 64

_U64 = np.dtype("<u8")


def _is_prime(p: int) -> bool:
    from sympy import isprime

    return bool(isprime(p))


@dataclass(frozen=True)
class FieldParams:
    """Modulus ``p``, fixed-point precision ``f`` and comparison bit width ``n``."""

    p: int = DEFAULT_P
    f: int = DEFAULT_F
    n: int = DEFAULT_N

    def __post_init__(self):
        if self.p < 3 or not _is_prime(self.p):
            raise ConfigurationError(f"p={self.p} is not an odd prime")
        if self.p >= 2**64:
            raise ConfigurationError("p must fit in 64 bits")
        if self.f < 0 or self.p <= 2 ** (self.f + 1):
            raise ConfigurationError(f"p must exceed 2^(f+1) (p={self.p}, f={self.f})")
        if not 1 <= self.n <= 64 or 2**self.n < self.p:
            raise ConfigurationError(f"need 2^n >= p with n <= 64 (n={self.n})")

    @cached_property
    def half(self) -> int:
        return self.p // 2

    @cached_property
    def scale(self) -> int:
        return 1 << self.f

    def check_capacity(self, count: int) -> None:
        """Counts up to ``count`` must not wrap around the modulus."""
        if count >= self.p:
            raise ConfigurationError(f"field of size {self.p} cannot hold counts up to {count}")

    # -- scalar arithmetic -------------------------------------------------

    def add(self, a: int, b: int) -> int:
        return (a + b) % self.p

    def sub(self, a: int, b: int) -> int:
        return (a - b) % self.p

    def mul(self, a: int, b: int) -> int:
        return (a * b) % self.p

    def neg(self, a: int) -> int:
        return (-a) % self.p

    def embed(self, v: int) -> int:
        """Map any integer (possibly negative) into ``[0, p)``."""
        return int(v) % self.p

    def signed(self, x: int) -> int:
        """Centered representative of ``x``."""
        x = int(x)
        return x - self.p if x > self.half else x

    # -- fixed point -------------------------------------------------------

    def encode(self, v: float) -> int:
        """``sign(v) * floor(|v| * 2^f)`` as a field element."""
        if not math.isfinite(v):
            raise FieldRangeError(f"cannot encode non-finite value {v!r}")
        scaled = abs(v) * self.scale  # exact: power-of-two scaling
        if scaled >= self.half:
            raise FieldRangeError(f"|{v}| * 2^{self.f} does not fit below p/2")
        mag = math.floor(scaled)
        return self.embed(-mag if v < 0 else mag)

    def decode(self, x: int) -> float:
        return self.signed(x) / self.scale

    def trunc(self, x: int) -> int:
        """Divide the centered value by ``2^f`` rounding toward minus infinity."""
        return self.embed(self.signed(x) >> self.f)

    def to_offset(self, x: int) -> int:
        return (int(x) + self.half) % self.p

    def from_offset(self, u: int) -> int:
        return (int(u) - self.half) % self.p

    # -- sampling ------------------------------------------------------------

    def random(self, rng: Randomness | None = None, count: int | None = None):
        """Uniform field element(s) by rejection sampling 64-bit words."""
        arr = random_elements(self, as_rng(rng), 1 if count is None else count)
        return int(arr[0]) if count is None else arr


# Free-function aliases matching the operation names used throughout the package.


def fe_add(params: FieldParams, a: int, b: int) -> int:
    return params.add(a, b)


def fe_sub(params: FieldParams, a: int, b: int) -> int:
    return params.sub(a, b)


def fe_mul(params: FieldParams, a: int, b: int) -> int:
    return params.mul(a, b)


def fe_neg(params: FieldParams, a: int) -> int:
    return params.neg(a)


def encode_fixed(params: FieldParams, v: float) -> int:
    return params.encode(v)


def decode_fixed(params: FieldParams, x: int) -> float:
    return params.decode(x)


def trunc_signed(params: FieldParams, x: int) -> int:
    return params.trunc(x)


def to_offset(params: FieldParams, x: int) -> int:
    return params.to_offset(x)


def from_offset(params: FieldParams, u: int) -> int:
    return params.from_offset(u)


# -- vectorised arithmetic on uint64 arrays ----------------------------------


def _u(x) -> np.ndarray:
    return np.asarray(x, dtype=_U64)


def vadd(params: FieldParams, a, b) -> np.ndarray:
    """Elementwise ``(a + b) mod p``; safe for any ``p < 2^64``."""
    a, b = _u(a), _u(b)
    P = np.uint64(params.p)
    s = a + b
    wrapped = s < a
    return np.where(wrapped | (s >= P), s - P, s)


def vsub(params: FieldParams, a, b) -> np.ndarray:
    a, b = _u(a), _u(b)
    d = a - b
    return np.where(a < b, d + np.uint64(params.p), d)


def vneg(params: FieldParams, a) -> np.ndarray:
    a = _u(a)
    return np.where(a == 0, a, np.uint64(params.p) - a)


def vmul(params: FieldParams, a, b) -> np.ndarray:
    """Elementwise product through Python integers (exact, not fast)."""
    a, b = _u(a), _u(b)
    out = (a.astype(object) * b.astype(object)) % params.p
    return out.astype(_U64)


def vsum(params: FieldParams, a, axis=None) -> np.ndarray | int:
    """Sum modulo p; folds 32-bit halves so the uint64 accumulator never wraps."""
    a = _u(a)
    if a.size >= 2**32:
        raise ValueError("vector too long for single-pass modular sum")
    lo = (a & np.uint64(0xFFFFFFFF)).sum(axis=axis, dtype=_U64)
    hi = (a >> np.uint64(32)).sum(axis=axis, dtype=_U64)
    if np.ndim(hi) == 0:
        return (int(hi) * (1 << 32) + int(lo)) % params.p
    res = (hi.astype(object) * (1 << 32) + lo.astype(object)) % params.p
    return res.astype(_U64)


def vmod(params: FieldParams, words) -> np.ndarray:
    """Reduce arbitrary 64-bit words into ``[0, p)``."""
    return _u(words) % np.uint64(params.p)


def vembed(params: FieldParams, ints) -> np.ndarray:
    """Embed a signed ``int64`` array into the field."""
    v = np.asarray(ints, dtype=np.int64)
    mag = np.abs(v).astype(_U64)
    return np.where(v < 0, vneg(params, mag % np.uint64(params.p)), mag % np.uint64(params.p))


def vsigned(params: FieldParams, x) -> np.ndarray:
    """Centered representatives as ``int64`` (requires ``p < 2^64``)."""
    x = _u(x)
    neg = x > np.uint64(params.half)
    out = x.astype(np.int64)
    out[neg] = -(np.uint64(params.p) - x[neg]).astype(np.int64)
    return out


def vencode(params: FieldParams, values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise FieldRangeError("cannot encode NaN/Inf")
    scaled = np.abs(v) * float(params.scale)
    if scaled.size and scaled.max() >= params.half:
        raise FieldRangeError(f"value magnitude too large for 2^{params.f} scaling")
    mags = np.floor(scaled).astype(np.int64)
    return vembed(params, np.where(v < 0, -mags, mags))


def vdecode(params: FieldParams, x) -> np.ndarray:
    return vsigned(params, x).astype(np.float64) / params.scale


def vto_offset(params: FieldParams, x) -> np.ndarray:
    return vadd(params, x, np.uint64(params.half))


def vfrom_offset(params: FieldParams, u) -> np.ndarray:
    return vsub(params, u, np.uint64(params.half))


def random_elements(params: FieldParams, rng: Randomness, count: int) -> np.ndarray:
    limit = (2**64 // params.p) * params.p  # accept words below the largest multiple of p
    out = np.empty(count, dtype=_U64)
    filled = 0
    while filled < count:
        need = count - filled
        words = np.frombuffer(rng.bytes(8 * need), dtype=_U64)
        if limit < 2**64:
            words = words[words < np.uint64(limit)]
        take = words[: count - filled] % np.uint64(params.p)
        out[filled : filled + len(take)] = take
        filled += len(take)
    return out


def pack_elements(values) -> bytes:
    return _u(values).astype(_U64).tobytes()


def unpack_elements(data: bytes) -> np.ndarray:
    if len(data) % 8:
        from .errors import DecodeError

        raise DecodeError("field element bytes must be a multiple of 8")
    return np.frombuffer(data, dtype=_U64).copy()
