"""Pseudorandomness: the MMO/AES-128 PRG used inside DCF trees, and byte sources.

The tree PRG expands one 128-bit seed into three blocks

    block_j = AES-128(key=tweak_j, seed) XOR seed,   j = 0, 1, 2

(Matyas-Meyer-Oseas with fixed public keys).  Block 0 yields the left child
seed and control bit, block 1 the right child, block 2 the two 64-bit value
words.  Seeds are handled in bulk as ``(M, 2)`` arrays of little-endian
``uint64`` words so a whole tree level is one ECB call per tweak.
"""

from __future__ import annotations

import hashlib
import os
import threading
from typing import Protocol

import numpy as np
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

SEED_BYTES = 16
N_TWEAKS = 3
TWEAKS = tuple(j.to_bytes(16, "little") for j in range(N_TWEAKS))

_U64 = np.dtype("<u8")
_LSB_CLEAR = np.uint64(0xFFFFFFFFFFFFFFFE)

# ECB encryptor contexts are not thread-safe; keep one key schedule per tweak per thread.
_local = threading.local()


def _encryptors():
    encs = getattr(_local, "encs", None)
    if encs is None:
        encs = [Cipher(algorithms.AES(k), modes.ECB()).encryptor() for k in TWEAKS]
        _local.encs = encs
    return encs


def mmo(seeds: np.ndarray, tweak: int) -> np.ndarray:
    """MMO compression of each row of ``seeds`` under public key ``TWEAKS[tweak]``."""
    seeds = np.ascontiguousarray(seeds, dtype=_U64)
    ct = _encryptors()[tweak].update(seeds.tobytes())
    return np.frombuffer(ct, dtype=_U64).reshape(seeds.shape) ^ seeds


def expand_batch(seeds: np.ndarray):
    """Expand ``(M, 2)`` seeds into children and value words.

    Returns ``(s_left, t_left, s_right, t_right, v_left, v_right)`` where seeds
    are ``(M, 2)`` uint64 with the control bit position cleared, control bits
    are bool ``(M,)`` and value words are raw uint64 ``(M,)`` (reduce them into
    the payload group with :func:`convert`).
    """
    b0 = mmo(seeds, 0)
    b1 = mmo(seeds, 1)
    b2 = mmo(seeds, 2)
    t_left = (b0[:, 0] & np.uint64(1)).astype(bool)
    t_right = (b1[:, 0] & np.uint64(1)).astype(bool)
    b0[:, 0] &= _LSB_CLEAR
    b1[:, 0] &= _LSB_CLEAR
    return b0, t_left, b1, t_right, b2[:, 0].copy(), b2[:, 1].copy()


def seeds_from_bytes(data: bytes) -> np.ndarray:
    if len(data) % SEED_BYTES:
        raise ValueError("seed bytes must be a multiple of 16")
    return np.frombuffer(data, dtype=_U64).reshape(-1, 2).copy()


def prg_expand(seed: bytes):
    """Scalar form of :func:`expand_batch` for a single 16-byte seed.

    Returns ``(left_seed, t_left, right_seed, t_right, v_left, v_right)`` with
    seeds as bytes, control bits as ints and value words as raw 64-bit ints.
    """
    if len(seed) != SEED_BYTES:
        raise ValueError(f"seed must be {SEED_BYTES} bytes, got {len(seed)}")
    sl, tl, sr, tr, vl, vr = expand_batch(seeds_from_bytes(seed))
    return (
        sl.astype(_U64).tobytes(),
        int(tl[0]),
        sr.astype(_U64).tobytes(),
        int(tr[0]),
        int(vl[0]),
        int(vr[0]),
    )


class Randomness(Protocol):
    def bytes(self, n: int) -> bytes: ...


class SystemRandomness:
    """OS entropy; the default for anything that leaves the process."""

    def bytes(self, n: int) -> bytes:
        return os.urandom(n)


class SeededRandomness:
    """Deterministic AES-128-CTR stream keyed by a seed, for reproducible runs.

    ``label`` gives domain separation so one master seed can drive several
    independent streams.
    """

    def __init__(self, seed: bytes | int | str, label: bytes | str = b""):
        if isinstance(seed, int):
            seed = seed.to_bytes((seed.bit_length() + 8) // 8 or 1, "little", signed=True)
        elif isinstance(seed, str):
            seed = seed.encode()
        if isinstance(label, str):
            label = label.encode()
        digest = hashlib.sha256(b"fssrag-drbg\x00" + label + b"\x00" + seed).digest()
        self._enc = Cipher(algorithms.AES(digest[:16]), modes.CTR(digest[16:])).encryptor()

    def bytes(self, n: int) -> bytes:
        return self._enc.update(bytes(n))

    def child(self, label: bytes | str) -> "SeededRandomness":
        if isinstance(label, str):
            label = label.encode()
        return SeededRandomness(self.bytes(32), label)


def default_rng() -> SystemRandomness:
    return SystemRandomness()


def as_rng(rng) -> Randomness:
    """Accept ``None`` (system entropy), a seed, or an object with ``bytes(n)``."""
    if rng is None:
        return SystemRandomness()
    if isinstance(rng, (int, bytes, str)):
        return SeededRandomness(rng)
    return rng


def random_seeds(rng: Randomness, count: int) -> np.ndarray:
    return seeds_from_bytes(rng.bytes(SEED_BYTES * count))


def random_u64(rng: Randomness, count: int) -> np.ndarray:
    return np.frombuffer(rng.bytes(8 * count), dtype=_U64).copy()
