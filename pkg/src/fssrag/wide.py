"""Arithmetic in a wide ring ``Z_Q`` held in residue-number-system form.

Dot products of two ``2^f``-scaled unit vectors reach ``2^(2f)`` which, at
``f = 32``, does not fit comfortably in a 64-bit prime field.  The secure dot
product therefore runs in ``Z_Q`` with ``Q`` the product of four 31-bit primes
(about ``2^124``), then truncates back into ``F_p`` (see :mod:`fssrag.dot`).

An element is a ``uint64`` array whose last axis holds the four residues.  On
the wire and on disk each residue is a little-endian ``u32``: 16 bytes per
element.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import DecodeError
from .prg import Randomness, SeededRandomness

MODULI = (2147483647, 2147483629, 2147483587, 2147483579)
Q = math.prod(MODULI)
L = len(MODULI)
ELEM_BYTES = 4 * L

_U64 = np.dtype("<u8")
_QV = np.array(MODULI, dtype=_U64)
# CRT basis: x = sum_i r_i * c_i (mod Q) with c_i = (Q/q_i) * ((Q/q_i)^-1 mod q_i).
_CRT = tuple((Q // q) * pow(Q // q, -1, q) % Q for q in MODULI)


def from_int(values) -> np.ndarray:
    """Embed Python ints or integer arrays (any sign, any size) into ``Z_Q``."""
    v = np.asarray(values)
    if v.dtype == object:
        out = np.empty(v.shape + (L,), dtype=_U64)
        for i, q in enumerate(MODULI):
            out[..., i] = np.asarray(v % q, dtype=object).astype(_U64)
        return out
    if v.dtype.kind == "u":
        return v.astype(_U64)[..., None] % _QV
    v = v.astype(np.int64)
    return (v[..., None] % _QV.astype(np.int64)).astype(_U64)


def to_int(x: np.ndarray) -> np.ndarray:
    """CRT reconstruction into Python ints in ``[0, Q)`` (object array)."""
    x = np.asarray(x, dtype=_U64)
    acc = np.zeros(x.shape[:-1], dtype=object)
    for i in range(L):
        acc = acc + x[..., i].astype(object) * _CRT[i]
    return np.asarray(acc % Q, dtype=object)


def to_signed(x: np.ndarray) -> np.ndarray:
    v = to_int(x)
    return np.where(v > Q // 2, v - Q, v).astype(object)


def add(a, b) -> np.ndarray:
    return (np.asarray(a, dtype=_U64) + np.asarray(b, dtype=_U64)) % _QV


def sub(a, b) -> np.ndarray:
    return (np.asarray(a, dtype=_U64) + _QV - np.asarray(b, dtype=_U64)) % _QV


def neg(a) -> np.ndarray:
    return (_QV - np.asarray(a, dtype=_U64)) % _QV


def mul(a, b) -> np.ndarray:
    """Elementwise product; residues are below ``2^31`` so products fit in 64 bits."""
    return (np.asarray(a, dtype=_U64) * np.asarray(b, dtype=_U64)) % _QV


def total(a, axis: int = 0) -> np.ndarray:
    """Sum over a non-residue axis."""
    a = np.asarray(a, dtype=_U64)
    if a.shape[axis] >= 2**33:
        raise ValueError("too many terms for a single-pass residue sum")
    return a.sum(axis=axis, dtype=_U64) % _QV


def matvec(A: np.ndarray, v: np.ndarray) -> np.ndarray:
    """``A @ v`` for ``A`` of shape ``(N, m, L)`` and ``v`` of shape ``(m, L)``.

    ``A`` is split into 16-bit halves so each partial product stays below
    ``2^47`` and sums of up to ``2^17`` terms cannot overflow.
    """
    A = np.asarray(A, dtype=_U64)
    v = np.asarray(v, dtype=_U64)
    if A.shape[1] >= 2**17:
        raise ValueError("vector dimension too large for exact residue matvec")
    out = np.empty((A.shape[0], L), dtype=_U64)
    mask = np.uint64(0xFFFF)
    for i, q in enumerate(MODULI):
        qi = np.uint64(q)
        a = A[..., i]
        lo = (a & mask) @ v[:, i] % qi
        hi = (a >> np.uint64(16)) @ v[:, i] % qi
        out[:, i] = (lo + (hi << np.uint64(16)) % qi) % qi
    return out


def random(rng: Randomness, shape) -> np.ndarray:
    """Uniform elements of ``Z_Q`` (independent uniform residues, by rejection)."""
    shape = (shape,) if isinstance(shape, int) else tuple(shape)
    count = int(np.prod(shape, dtype=np.int64))
    out = np.empty((count, L), dtype=_U64)
    for i, q in enumerate(MODULI):
        limit = np.uint64((2**64 // q) * q)
        filled = 0
        col = out[:, i]
        while filled < count:
            words = np.frombuffer(rng.bytes(8 * (count - filled)), dtype=_U64)
            words = words[words < limit][: count - filled] % np.uint64(q)
            col[filled : filled + len(words)] = words
            filled += len(words)
    return out.reshape(shape + (L,))


def expand_seed(seed: bytes, shape, label: str = "wide") -> np.ndarray:
    """Deterministic pseudorandom ``Z_Q`` elements from a 16-byte seed."""
    return random(SeededRandomness(seed, label), shape)


def pack(x: np.ndarray) -> bytes:
    return np.ascontiguousarray(x, dtype=_U64).astype("<u4").tobytes()


def unpack(data: bytes, shape=None) -> np.ndarray:
    if len(data) % ELEM_BYTES:
        raise DecodeError(f"wide-ring bytes must be a multiple of {ELEM_BYTES}")
    x = np.frombuffer(data, dtype="<u4").astype(_U64).reshape(-1, L)
    if np.any(x >= _QV):
        raise DecodeError("residue out of range")
    if shape is not None:
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        if int(np.prod(shape, dtype=np.int64)) != x.shape[0]:
            raise DecodeError(f"expected {shape} wide elements, got {x.shape[0]}")
        x = x.reshape(shape + (L,))
    return x
