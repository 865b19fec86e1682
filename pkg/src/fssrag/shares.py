"""Two-party additive secret sharing over F_p."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DecodeError, ShareUsageError
from .field import FieldParams, random_elements, vadd, vmul, vneg, vsub
from .prg import Randomness, as_rng

_U64 = np.dtype("<u8")
_HEADER = struct.Struct("<BQ")


@dataclass(frozen=True)
class Share:
    """One server's share: a field element (int) or a flat uint64 vector."""

    party: int
    value: int | np.ndarray

    def __post_init__(self):
        if self.party not in (0, 1):
            raise ShareUsageError(f"party must be 0 or 1, got {self.party}")

    @property
    def is_vector(self) -> bool:
        return isinstance(self.value, np.ndarray)

    def __len__(self) -> int:
        return len(self.value) if self.is_vector else 1


def _same_party(a: Share, b: Share) -> None:
    if a.party != b.party:
        raise ShareUsageError(f"cannot combine shares of party {a.party} and {b.party}")


def _wrap(party: int, value) -> Share:
    if isinstance(value, np.ndarray) and value.ndim > 0:
        return Share(party, value)
    return Share(party, int(value))


def share(params: FieldParams, x, rng: Randomness | None = None, mask=None) -> tuple[Share, Share]:
    """Split ``x`` (int or uint64 array) into ``(r, x - r)``.

    ``mask`` forces party 0's share; otherwise it is drawn uniformly from ``rng``.
    """
    if isinstance(x, np.ndarray):
        r = random_elements(params, as_rng(rng), x.size) if mask is None else np.asarray(mask, dtype=_U64)
        r = r.reshape(x.shape)
        return Share(0, r), Share(1, vsub(params, x.astype(_U64), r))
    r = params.random(rng) if mask is None else int(mask) % params.p
    return Share(0, r), Share(1, params.sub(int(x) % params.p, r))


def reconstruct(params: FieldParams, s0: Share, s1: Share):
    if {s0.party, s1.party} != {0, 1}:
        raise ShareUsageError("reconstruction needs one share from each party")
    if s0.is_vector or s1.is_vector:
        return vadd(params, s0.value, s1.value)
    return params.add(s0.value, s1.value)


def add_local(params: FieldParams, a: Share, b: Share) -> Share:
    _same_party(a, b)
    if a.is_vector or b.is_vector:
        return _wrap(a.party, vadd(params, a.value, b.value))
    return Share(a.party, params.add(a.value, b.value))


def sub_local(params: FieldParams, a: Share, b: Share) -> Share:
    _same_party(a, b)
    if a.is_vector or b.is_vector:
        return _wrap(a.party, vsub(params, a.value, b.value))
    return Share(a.party, params.sub(a.value, b.value))


def neg_local(params: FieldParams, a: Share) -> Share:
    if a.is_vector:
        return Share(a.party, vneg(params, a.value))
    return Share(a.party, params.neg(a.value))


def scale_by_public(params: FieldParams, a: Share, c: int) -> Share:
    if a.is_vector:
        return Share(a.party, vmul(params, a.value, np.full(a.value.shape, c % params.p, dtype=_U64)))
    return Share(a.party, params.mul(a.value, c))


def add_public_const(params: FieldParams, a: Share, c) -> Share:
    """Add a public constant; only party 1 absorbs it, party 0 is unchanged."""
    if a.party == 0:
        return a
    if a.is_vector:
        return Share(1, vadd(params, a.value, np.asarray(c, dtype=_U64)))
    return Share(1, params.add(a.value, int(c)))


def serialize_share_vector(s: Share) -> bytes:
    """``party u8 | length u64 | packed little-endian u64 elements``."""
    v = np.atleast_1d(np.asarray(s.value, dtype=_U64))
    return _HEADER.pack(s.party, v.size) + v.tobytes()


def deserialize_share_vector(data: bytes) -> Share:
    if len(data) < _HEADER.size:
        raise DecodeError("share vector shorter than its header")
    party, length = _HEADER.unpack_from(data)
    body = data[_HEADER.size :]
    if party not in (0, 1):
        raise DecodeError(f"bad party byte {party}")
    if len(body) != 8 * length:
        raise DecodeError(f"share vector declares {length} elements but carries {len(body)} bytes")
    return Share(party, np.frombuffer(body, dtype=_U64).copy())
