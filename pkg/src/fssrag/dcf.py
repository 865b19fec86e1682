"""Distributed comparison functions over an ``n``-bit domain with F_p payloads.

Tree construction with per-level seed, control-bit and value correction
words (Boyle et al., "Function Secret Sharing for Mixed-Mode and Fixed-Point
Secure Computation").  For ``(k0, k1) = dcf_gen(a, b)``::

    dcf_eval(k0, x) + dcf_eval(k1, x) == b  if x < a  else 0     (mod p)

Keys are handled as batches: every array carries a leading key axis ``K``.
Evaluation pairs key ``i`` with point ``i``; a batch of one key broadcasts
over any number of points.  Control flow is a fixed ``n`` iterations.

Serialized record (little-endian, one per key)::

    party u8 | n u8 | lambda u16 | root seed 16B
    | n x (seed correction 16B | value correction u64 | t bits u8)
    | final correction u64

so a key is ``28 + 25 n`` bytes (1628 bytes at n = 64).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import prg
from .errors import ConfigurationError, DecodeError
from .field import FieldParams, vadd, vmod, vneg, vsub

LAMBDA = 128
_U64 = np.dtype("<u8")


def key_size(n: int) -> int:
    """Serialized size in bytes of one DCF key over an ``n``-bit domain."""
    return 28 + 25 * n


def _record_dtype(n: int) -> np.dtype:
    level = np.dtype([("seed", "<u8", (2,)), ("v", "<u8"), ("t", "u1")])
    return np.dtype(
        [
            ("party", "u1"),
            ("n", "u1"),
            ("lam", "<u2"),
            ("root", "<u8", (2,)),
            ("cw", level, (n,)),
            ("final", "<u8"),
        ]
    )


@dataclass(frozen=True, eq=False)
class DcfKey:
    """A batch of ``K`` DCF keys held by one party.

    ``root`` is ``(K, 2)``; ``cw_seed`` ``(K, n, 2)``; ``cw_v``, ``cw_tl``,
    ``cw_tr`` ``(K, n)``; ``cw_final`` ``(K,)``.  Correction words are
    identical in both parties' keys, so a dealer may share those arrays.
    """

    party: int
    n: int
    root: np.ndarray
    cw_seed: np.ndarray
    cw_v: np.ndarray
    cw_tl: np.ndarray
    cw_tr: np.ndarray
    cw_final: np.ndarray
    lam: int = LAMBDA

    def __len__(self) -> int:
        return self.root.shape[0]

    def __getitem__(self, idx) -> "DcfKey":
        if isinstance(idx, (int, np.integer)):
            idx = slice(int(idx), int(idx) + 1) if idx != -1 else slice(-1, None)
        return DcfKey(
            self.party,
            self.n,
            self.root[idx],
            self.cw_seed[idx],
            self.cw_v[idx],
            self.cw_tl[idx],
            self.cw_tr[idx],
            self.cw_final[idx],
            self.lam,
        )

    @property
    def nbytes(self) -> int:
        return len(self) * key_size(self.n)


def _check(params: FieldParams, n: int, lam: int) -> None:
    if lam != LAMBDA:
        raise ConfigurationError(f"only lambda={LAMBDA} is supported (MMO/AES-128 PRG)")
    if not 1 <= n <= 64:
        raise ConfigurationError(f"domain bits n={n} outside [1, 64]")
    if n != params.n:
        raise ConfigurationError(f"key domain n={n} does not match field parameter n={params.n}")


def _bits(x: np.ndarray, n: int, level: int) -> np.ndarray:
    return ((x >> np.uint64(n - 1 - level)) & np.uint64(1)).astype(bool)


def _cond_neg(params: FieldParams, v: np.ndarray, flag: np.ndarray) -> np.ndarray:
    return np.where(flag, vneg(params, v), v)


def dcf_gen(params: FieldParams, a, b, rng=None, lam: int = LAMBDA) -> tuple[DcfKey, DcfKey]:
    """Keys for ``f(x) = b * [x < a]``; ``a`` and ``b`` may be scalars or equal-length arrays."""
    n = params.n
    _check(params, n, lam)
    rng = prg.as_rng(rng)
    a = np.atleast_1d(np.asarray(a, dtype=_U64))
    b = np.atleast_1d(np.asarray(b, dtype=_U64))
    if a.shape != b.shape:
        a, b = np.broadcast_arrays(a, b)
        a, b = a.copy(), b.copy()
    K = a.size
    if n < 64 and np.any(a >= np.uint64(1 << n)):
        raise ConfigurationError(f"comparison point outside the {n}-bit domain")
    if np.any(b >= np.uint64(params.p)):
        raise ConfigurationError("payload must be a field element")

    roots = prg.random_seeds(rng, 2 * K).reshape(2, K, 2)
    s0, s1 = roots[0].copy(), roots[1].copy()
    t0 = np.zeros(K, dtype=bool)
    t1 = np.ones(K, dtype=bool)
    v_alpha = np.zeros(K, dtype=_U64)

    cw_seed = np.empty((K, n, 2), dtype=_U64)
    cw_v = np.empty((K, n), dtype=_U64)
    cw_tl = np.empty((K, n), dtype=bool)
    cw_tr = np.empty((K, n), dtype=bool)

    for i in range(n):
        ai = _bits(a, n, i)
        sl0, tl0, sr0, tr0, vl0, vr0 = prg.expand_batch(s0)
        sl1, tl1, sr1, tr1, vl1, vr1 = prg.expand_batch(s1)
        vl0, vr0, vl1, vr1 = (vmod(params, w) for w in (vl0, vr0, vl1, vr1))

        # Keep the branch that follows a; the other branch is "lost".
        col = ai[:, None]
        s_lose0 = np.where(col, sl0, sr0)
        s_lose1 = np.where(col, sl1, sr1)
        s_keep0 = np.where(col, sr0, sl0)
        s_keep1 = np.where(col, sr1, sl1)
        v_lose0 = np.where(ai, vl0, vr0)
        v_lose1 = np.where(ai, vl1, vr1)
        v_keep0 = np.where(ai, vr0, vl0)
        v_keep1 = np.where(ai, vr1, vl1)
        t_keep0 = np.where(ai, tr0, tl0)
        t_keep1 = np.where(ai, tr1, tl1)

        s_cw = s_lose0 ^ s_lose1
        v_cw = vsub(params, vsub(params, v_lose1, v_lose0), v_alpha)
        # Losing the left branch means every x on it is below a: it earns b.
        v_cw = np.where(ai, vadd(params, v_cw, b), v_cw)
        v_cw = _cond_neg(params, v_cw, t1)

        v_alpha = vadd(params, vsub(params, v_alpha, v_keep1), v_keep0)
        v_alpha = vadd(params, v_alpha, _cond_neg(params, v_cw, t1))

        tl_cw = tl0 ^ tl1 ^ ai ^ True
        tr_cw = tr0 ^ tr1 ^ ai
        t_keep_cw = np.where(ai, tr_cw, tl_cw)

        cw_seed[:, i] = s_cw
        cw_v[:, i] = v_cw
        cw_tl[:, i] = tl_cw
        cw_tr[:, i] = tr_cw

        s0 = s_keep0 ^ np.where(t0[:, None], s_cw, np.uint64(0))
        s1 = s_keep1 ^ np.where(t1[:, None], s_cw, np.uint64(0))
        t0 = t_keep0 ^ (t0 & t_keep_cw)
        t1 = t_keep1 ^ (t1 & t_keep_cw)

    final = vsub(params, vsub(params, vmod(params, s1[:, 0]), vmod(params, s0[:, 0])), v_alpha)
    final = _cond_neg(params, final, t1)

    k0 = DcfKey(0, n, roots[0], cw_seed, cw_v, cw_tl, cw_tr, final, lam)
    k1 = DcfKey(1, n, roots[1], cw_seed, cw_v, cw_tl, cw_tr, final, lam)
    return k0, k1


def dcf_eval(params: FieldParams, key: DcfKey, x):
    """Party share of ``f(x)``.  Scalar ``x`` and a single key give an ``int``."""
    scalar = np.ndim(x) == 0 and len(key) == 1
    x = np.atleast_1d(np.asarray(x, dtype=_U64))
    K = len(key)
    M = max(K, x.size)
    if K not in (1, M) or x.size not in (1, M):
        raise ValueError(f"cannot pair {K} keys with {x.size} points")
    n = key.n
    _check(params, n, key.lam)
    x = np.broadcast_to(x, (M,))

    s = np.broadcast_to(key.root, (M, 2)).copy()
    t = np.full(M, key.party == 1, dtype=bool)
    acc = np.zeros(M, dtype=_U64)
    zero = np.uint64(0)
    for i in range(n):
        xi = _bits(x, n, i)
        sl, tl, sr, tr, vl, vr = prg.expand_batch(s)
        cs = key.cw_seed[:, i]
        if K == 1:
            scw, vcw = cs[0], key.cw_v[0, i]
            tlc, trc = bool(key.cw_tl[0, i]), bool(key.cw_tr[0, i])
            s = np.where(xi[:, None], sr, sl) ^ np.where(t[:, None], scw, zero)
            t_next = np.where(xi, tr ^ (t & trc), tl ^ (t & tlc))
        else:
            scw, vcw = cs, key.cw_v[:, i]
            s = np.where(xi[:, None], sr, sl) ^ np.where(t[:, None], scw, zero)
            t_next = np.where(xi, tr ^ (t & key.cw_tr[:, i]), tl ^ (t & key.cw_tl[:, i]))
        v = vmod(params, np.where(xi, vr, vl))
        acc = vadd(params, acc, v)
        acc = vadd(params, acc, np.where(t, vcw, zero))
        t = t_next
    acc = vadd(params, acc, vmod(params, s[:, 0]))
    fin = key.cw_final[0] if K == 1 else key.cw_final
    acc = vadd(params, acc, np.where(t, fin, zero))
    if key.party == 1:
        acc = vneg(params, acc)
    return int(acc[0]) if scalar else acc


def dcf_key_serialize(key: DcfKey) -> bytes:
    rec = np.zeros(len(key), dtype=_record_dtype(key.n))
    rec["party"] = key.party
    rec["n"] = key.n
    rec["lam"] = key.lam
    rec["root"] = key.root
    rec["cw"]["seed"] = key.cw_seed
    rec["cw"]["v"] = key.cw_v
    rec["cw"]["t"] = key.cw_tl.astype(np.uint8) | (key.cw_tr.astype(np.uint8) << 1)
    rec["final"] = key.cw_final
    return rec.tobytes()


def _peek_n(data: bytes) -> int:
    if len(data) < 4:
        raise DecodeError("DCF key shorter than its header")
    return data[1]


def dcf_records_from_array(rec: np.ndarray) -> DcfKey:
    """Build a key batch from a structured record array (see module docstring)."""
    if rec.size == 0:
        raise DecodeError("empty DCF key batch")
    party = int(rec["party"][0])
    n = int(rec["n"][0])
    lam = int(rec["lam"][0])
    if party not in (0, 1) or np.any(rec["party"] != party):
        raise DecodeError("inconsistent party bytes in DCF key batch")
    if np.any(rec["n"] != n) or np.any(rec["lam"] != lam):
        raise DecodeError("inconsistent header in DCF key batch")
    if lam != LAMBDA:
        raise DecodeError(f"unsupported lambda {lam}")
    tbits = rec["cw"]["t"]
    if np.any(tbits > 3):
        raise DecodeError("control-bit byte out of range")
    return DcfKey(
        party,
        n,
        np.ascontiguousarray(rec["root"]).astype(_U64),
        np.ascontiguousarray(rec["cw"]["seed"]).astype(_U64),
        np.ascontiguousarray(rec["cw"]["v"]).astype(_U64),
        (tbits & 1).astype(bool),
        (tbits >> 1).astype(bool),
        np.ascontiguousarray(rec["final"]).astype(_U64),
        lam,
    )


def dcf_key_deserialize(data: bytes, count: int | None = None) -> DcfKey:
    n = _peek_n(data)
    if not 1 <= n <= 64:
        raise DecodeError(f"bad domain width {n}")
    size = key_size(n)
    if len(data) % size or (count is not None and len(data) != count * size):
        raise DecodeError(f"DCF key bytes ({len(data)}) are not a whole number of {size}-byte records")
    return dcf_records_from_array(np.frombuffer(data, dtype=_record_dtype(n)))


def concat_keys(keys: list[DcfKey]) -> DcfKey:
    first = keys[0]
    if any(k.party != first.party or k.n != first.n for k in keys):
        raise ValueError("cannot concatenate keys of different parties or widths")
    return DcfKey(
        first.party,
        first.n,
        np.concatenate([k.root for k in keys]),
        np.concatenate([k.cw_seed for k in keys]),
        np.concatenate([k.cw_v for k in keys]),
        np.concatenate([k.cw_tl for k in keys]),
        np.concatenate([k.cw_tr for k in keys]),
        np.concatenate([k.cw_final for k in keys]),
        first.lam,
    )
