"""Batched secure dot products and the conversion of results into F_p shares.

Prompt ``s`` and documents ``x_j`` are ``2^f``-scaled integers shared in the
wide ring ``Z_Q`` (:mod:`fssrag.wide`).  With dealer masks ``r^a`` (fresh per
query), ``r^b`` (static, one per document coordinate) and
``rab_j = sum_n r^a_n r^b_{j,n}``, the servers open ``d = s - r^a`` per query
and ``e_j = x_j - r^b_j`` once at ingestion, then locally compute

    [z_j]_i = [rab_j]_i + e_j . [r^a]_i + d . [r^b_j]_i + i * (d . e_j)

which reconstructs to ``z_j = s . x_j`` exactly (scale ``2^(2f)``).

Truncation to scale ``2^f`` uses a dealer-supplied ``R_j`` uniform in
``[0, 2^(B+kappa))`` shared in ``Z_Q`` together with ``floor(R_j / 2^f)`` shared
in ``F_p``.  The servers open ``u_j = z_j + R_j + 2^B`` (statistically hiding
``z_j``, ``|z_j| < 2^B``) and set

    [d_j]_1 = floor(u_j / 2^f) - 2^(B-f) - [Rt_j]_1,     [d_j]_0 = -[Rt_j]_0

so ``d_j`` is ``floor(z_j / 2^f)`` or one more.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import wide
from .errors import FieldRangeError, ProtocolError
from .field import FieldParams, vsub
from .prg import SEED_BYTES, as_rng

KAPPA = 56
PROMPT_LABEL = "prompt-share"
_U64 = np.dtype("<u8")


def trunc_bits(params: FieldParams) -> int:
    """Bound ``B`` with ``|z| < 2^B`` for products of two near-unit vectors."""
    return 2 * params.f + 2


def check_ring(params: FieldParams) -> None:
    if trunc_bits(params) + KAPPA + 1 > wide.Q.bit_length() - 1:
        raise FieldRangeError(f"f={params.f} is too large for the {wide.Q.bit_length()}-bit ring")


@dataclass(frozen=True, eq=False)
class DotCorrelation:
    """One party's per-query dot-product and truncation randomness."""

    party: int
    ra: np.ndarray  # (m, L) shares of r^a
    rab: np.ndarray  # (N, L) shares of sum_n r^a_n r^b_{j,n}
    R: np.ndarray  # (N, L) shares of the truncation mask
    Rt: np.ndarray  # (N,) F_p shares of floor(R / 2^f)


def encode_wide(params: FieldParams, values) -> np.ndarray:
    """``sign(v) floor(|v| 2^f)`` embedded in ``Z_Q``."""
    v = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise FieldRangeError("cannot encode NaN/Inf")
    scaled = np.abs(v) * float(params.scale)
    if scaled.size and scaled.max() >= 2.0**62:
        raise FieldRangeError("value magnitude too large to encode")
    mags = np.floor(scaled).astype(np.int64)
    return wide.from_int(np.where(v < 0, -mags, mags))


def encode_ints(params: FieldParams, values) -> np.ndarray:
    """The signed integers :func:`encode_wide` embeds (plaintext oracle helper)."""
    v = np.asarray(values, dtype=np.float64)
    mags = np.floor(np.abs(v) * float(params.scale)).astype(np.int64)
    return np.where(v < 0, -mags, mags)


def prompt_share_from_seed(seed: bytes, m: int) -> np.ndarray:
    if len(seed) != SEED_BYTES:
        raise ProtocolError(f"prompt seed must be {SEED_BYTES} bytes")
    return wide.expand_seed(seed, m, PROMPT_LABEL)


def share_prompt(params: FieldParams, prompt, rng=None) -> tuple[bytes, np.ndarray]:
    """Share an embedding: party 0 receives a 16-byte seed, party 1 ``s - PRG(seed)``."""
    s = encode_wide(params, prompt)
    seed = as_rng(rng).bytes(SEED_BYTES)
    return seed, wide.sub(s, prompt_share_from_seed(seed, s.shape[0]))


def open_prompt_masks(prompt_share: np.ndarray, corr: DotCorrelation) -> np.ndarray:
    """This party's contribution to the public ``d = s - r^a``."""
    if prompt_share.shape != corr.ra.shape:
        raise ProtocolError(f"prompt has {prompt_share.shape[0]} dims, correlation {corr.ra.shape[0]}")
    return wide.sub(prompt_share, corr.ra)


def doc_mask_contribution(doc_share: np.ndarray, rb_share: np.ndarray) -> np.ndarray:
    """This party's contribution to the public ``e = x - r^b`` (computed once, offline)."""
    if doc_share.shape != rb_share.shape:
        raise ProtocolError(f"document matrix {doc_share.shape[:2]} vs masks {rb_share.shape[:2]}")
    return wide.sub(doc_share, rb_share)


def publish(c0: np.ndarray, c1: np.ndarray) -> np.ndarray:
    """Public value from both parties' contributions."""
    return wide.add(c0, c1)


precompute_doc_masks = publish


def dot_finish(party: int, d: np.ndarray, e: np.ndarray, corr: DotCorrelation, rb_share: np.ndarray) -> np.ndarray:
    """Shares of ``z_j = s . x_j`` in ``Z_Q`` for every document."""
    if corr is None or rb_share is None:
        raise ProtocolError("missing dot-product correlation")
    N, m = e.shape[:2]
    if d.shape[0] != m or rb_share.shape[:2] != (N, m) or corr.rab.shape[0] != N:
        raise ProtocolError("dot-product operand shapes disagree")
    z = wide.add(corr.rab, wide.matvec(e, corr.ra))
    z = wide.add(z, wide.matvec(rb_share, d))
    if party == 1:
        z = wide.add(z, wide.matvec(e, d))
    return z


def trunc_open(params: FieldParams, party: int, z_share: np.ndarray, corr: DotCorrelation) -> np.ndarray:
    """Contribution to ``u = z + R + 2^B``; party 1 adds the offset."""
    c = wide.add(z_share, corr.R)
    if party == 1:
        c = wide.add(c, wide.from_int(np.array(1 << trunc_bits(params), dtype=object)))
    return c


def trunc_finish(params: FieldParams, party: int, u: np.ndarray, corr: DotCorrelation) -> np.ndarray:
    """F_p shares of the truncated distances from the opened ``u``."""
    if party == 0:
        return vsub(params, np.zeros_like(corr.Rt), corr.Rt)
    f, B = params.f, trunc_bits(params)
    top = wide.to_int(u)
    if np.any(top >= 1 << (B + KAPPA + 1)):
        raise ProtocolError("opened truncation value outside its range")
    q = (top >> f) - (1 << (B - f))
    q = (q % params.p).astype(_U64)
    return vsub(params, q, corr.Rt)
