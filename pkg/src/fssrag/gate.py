"""Masked interval-containment gate built from two DCF keys.

For a public interval ``[x_l, x_r)`` with ``0 <= x_l <= x_r <= p`` the dealer
(or the user) samples a mask ``r`` and produces

* ``k^l``: DCF for ``x < x_l + r`` with payload ``p - 1`` (i.e. ``-1``),
* ``k^r``: DCF for ``x < x_r + r`` with payload ``1``,
* a shared correction ``w``.

The holders of ``[x]`` publish ``x_hat = x + r`` and output
``Eval(k^l, x_hat) + Eval(k^r, x_hat) + [w]``.  With ``x'_l, x'_r`` the masked
endpoints reduced mod p, the DCF terms give ``1{x'_l <= x_hat < x'_r}`` when the
masked interval does not wrap and ``1{...} - 1`` when it does, so
``w = 1{x'_l > x'_r}``.  The full ray ``[0, p)`` masks to ``x'_l == x'_r`` and
needs one more unit: ``w`` also includes ``1{x_r - x_l == p}``.

Serialized record per key::

    party u8 | r share u64 | k^l DCF record | k^r DCF record | w share u64
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from . import dcf
from .errors import ConfigurationError, DecodeError, KeyReuseError, ShareUsageError
from .field import FieldParams, random_elements, vadd, vsub
from .prg import as_rng

_U64 = np.dtype("<u8")


def cmp_key_size(n: int) -> int:
    """Serialized bytes of one gate key: ``17 + 2 (28 + 25 n)``."""
    return 17 + 2 * dcf.key_size(n)


def _record_dtype(n: int) -> np.dtype:
    rec = dcf._record_dtype(n)
    return np.dtype([("party", "u1"), ("r", "<u8"), ("low", rec), ("high", rec), ("w", "<u8")])


@dataclass(eq=False)
class CmpKey:
    """A batch of ``K`` gate keys for one party (``K == 1`` broadcasts)."""

    party: int
    r: np.ndarray
    low: dcf.DcfKey
    high: dcf.DcfKey
    w: np.ndarray
    _used: bool = field(default=False, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def __len__(self) -> int:
        return self.r.shape[0]

    @property
    def used(self) -> bool:
        return self._used

    def __getitem__(self, idx) -> "CmpKey":
        if isinstance(idx, (int, np.integer)):
            idx = slice(int(idx), int(idx) + 1)
        return CmpKey(self.party, self.r[idx], self.low[idx], self.high[idx], self.w[idx])

    @property
    def nbytes(self) -> int:
        return len(self) * cmp_key_size(self.low.n)


def masked_endpoints(params: FieldParams, x_l, x_r, r) -> tuple[np.ndarray, np.ndarray]:
    """DCF comparison points ``(x_l + r) mod p`` and ``(x_r + r) mod p``."""
    ro = np.asarray(r, dtype=_U64).astype(object)
    xl = np.asarray(x_l, dtype=object)
    xr = np.asarray(x_r, dtype=object)
    return ((xl + ro) % params.p).astype(_U64), ((xr + ro) % params.p).astype(_U64)


def wrap_correction(params: FieldParams, x_l, x_r, r) -> np.ndarray:
    """Plaintext ``w``: 1 when the masked interval wraps, plus 1 for the full ray."""
    xl_m, xr_m = masked_endpoints(params, x_l, x_r, r)
    full = (np.asarray(x_r, dtype=object) - np.asarray(x_l, dtype=object) == params.p).astype(_U64)
    return (xl_m > xr_m).astype(_U64) + full


def _gen(params: FieldParams, x_l, x_r, rng, low_payload, high_payload, w_extra=0):
    p = params.p
    x_l = np.atleast_1d(np.asarray(x_l, dtype=object))
    x_r = np.atleast_1d(np.asarray(x_r, dtype=object))
    x_l, x_r = np.broadcast_arrays(x_l, x_r)
    if np.any((x_l < 0) | (x_l >= p)):
        raise ShareUsageError("lower endpoint must lie in [0, p)")
    if np.any((x_r < x_l) | (x_r > p)):
        raise ShareUsageError("need x_l <= x_r <= p")
    K = x_l.size
    rng = as_rng(rng)
    r = random_elements(params, rng, K)
    xl_m, xr_m = masked_endpoints(params, x_l, x_r, r)
    w = wrap_correction(params, x_l, x_r, r)
    if w_extra:
        w = vadd(params, w, np.uint64(w_extra % p))
    kl0, kl1 = dcf.dcf_gen(params, xl_m, np.full(K, low_payload, dtype=_U64), rng)
    kh0, kh1 = dcf.dcf_gen(params, xr_m, np.full(K, high_payload, dtype=_U64), rng)
    r0 = random_elements(params, rng, K)
    w0 = random_elements(params, rng, K)
    k0 = CmpKey(0, r0, kl0, kh0, w0)
    k1 = CmpKey(1, vsub(params, r, r0), kl1, kh1, vsub(params, w, w0))
    return k0, k1


def cmp_gen(params: FieldParams, x_l, x_r, rng=None) -> tuple[CmpKey, CmpKey]:
    """Gate keys for ``[x_l, x_r)``; array endpoints give a batch of independent keys."""
    return _gen(params, x_l, x_r, rng, params.p - 1, 1)


def cmp_gen_rigged(params: FieldParams, x_l, x_r, rng=None, high_payload=2, w_extra=0):
    """Malformed keys a cheating user could send: indicator values other than 0/1.

    Test fixture for the servers' binary check; never used by honest code.
    """
    return _gen(params, x_l, x_r, rng, params.p - 1, high_payload, w_extra)


def cmp_eval_mask(params: FieldParams, key: CmpKey, xs) -> np.ndarray:
    """This party's contribution ``[x] + [r]`` to the masked opening.

    ``xs`` is a share vector (or a :class:`~fssrag.shares.Share`).  The key is
    consumed: a second call raises :class:`KeyReuseError`.
    """
    party = getattr(xs, "party", key.party)
    if party != key.party:
        raise ShareUsageError(f"party {key.party} key used with a party {party} share")
    x = np.atleast_1d(np.asarray(getattr(xs, "value", xs), dtype=_U64))
    if len(key) not in (1, x.size):
        raise ShareUsageError(f"{len(key)} gate keys cannot mask {x.size} values")
    with key._lock:
        if key._used:
            raise KeyReuseError("gate key already used for a masked opening")
        key._used = True
    return vadd(params, x, key.r)


def combine(params: FieldParams, y_low, y_high, w) -> np.ndarray:
    """``[y] = [y^l] + [y^r] + [w]``."""
    return vadd(params, vadd(params, y_low, y_high), w)


def cmp_eval_finish(params: FieldParams, key: CmpKey, xhat) -> np.ndarray:
    """Share of the 0/1 interval indicator at the published masked value(s)."""
    xhat = np.atleast_1d(np.asarray(xhat, dtype=_U64))
    if np.any(xhat >= np.uint64(params.p)):
        raise ShareUsageError("masked value is not a field element")
    yl = dcf.dcf_eval(params, key.low, xhat)
    yh = dcf.dcf_eval(params, key.high, xhat)
    return combine(params, yl, yh, key.w)


def cmp_key_serialize(key: CmpKey) -> bytes:
    n = key.low.n
    rec = np.zeros(len(key), dtype=_record_dtype(n))
    rec["party"] = key.party
    rec["r"] = key.r
    rec["low"] = np.frombuffer(dcf.dcf_key_serialize(key.low), dtype=dcf._record_dtype(n))
    rec["high"] = np.frombuffer(dcf.dcf_key_serialize(key.high), dtype=dcf._record_dtype(n))
    rec["w"] = key.w
    return rec.tobytes()


def cmp_key_deserialize(data: bytes, params: FieldParams, count: int | None = None) -> CmpKey:
    n = params.n
    size = cmp_key_size(n)
    if not data or len(data) % size or (count is not None and len(data) != count * size):
        raise DecodeError(f"gate key bytes ({len(data)}) are not a whole number of {size}-byte records")
    rec = np.frombuffer(data, dtype=_record_dtype(n))
    party = int(rec["party"][0])
    if party not in (0, 1) or np.any(rec["party"] != party):
        raise DecodeError("inconsistent party bytes in gate key batch")
    low = dcf.dcf_records_from_array(rec["low"])
    high = dcf.dcf_records_from_array(rec["high"])
    if low.party != party or high.party != party or low.n != n or high.n != n:
        raise DecodeError("embedded DCF keys do not match the gate key header")
    r = rec["r"].astype(_U64)
    w = rec["w"].astype(_U64)
    if np.any(r >= np.uint64(params.p)) or np.any(w >= np.uint64(params.p)):
        raise DecodeError("gate key share is not a field element")
    return CmpKey(party, r, low, high, w)


def concat_cmp_keys(keys: list[CmpKey]) -> CmpKey:
    party = keys[0].party
    if any(k.party != party for k in keys):
        raise ConfigurationError("cannot concatenate gate keys of different parties")
    return CmpKey(
        party,
        np.concatenate([k.r for k in keys]),
        dcf.concat_keys([k.low for k in keys]),
        dcf.concat_keys([k.high for k in keys]),
        np.concatenate([k.w for k in keys]),
    )
