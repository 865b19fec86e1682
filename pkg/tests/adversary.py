"""Frame-level client for driving servers outside the honest protocol."""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor

from fssrag import dot, gate, wide
from fssrag.wire import Frame, MsgType


def ray_keys(params, d_k: int, rng=None, rigged: dict | None = None) -> tuple[bytes, bytes]:
    """Serialized gate keys for ``[offset(d_k), p)``; ``rigged`` passes through to the rigged generator."""
    lo = params.to_offset(d_k % params.p)
    if rigged is None:
        k0, k1 = gate.cmp_gen(params, lo, params.p, rng)
    else:
        k0, k1 = gate.cmp_gen_rigged(params, lo, params.p, rng, **rigged)
    return gate.cmp_key_serialize(k0), gate.cmp_key_serialize(k1)


def prompt_frames(params, prompt, qid: bytes, rng=None) -> tuple[Frame, Frame]:
    seed, share1 = dot.share_prompt(params, prompt, rng)
    return Frame(MsgType.PROMPT_SHARE, qid, seed), Frame(MsgType.PROMPT_SHARE, qid, wide.pack(share1))


def exchange(channels, frames: tuple[list[Frame], list[Frame]], until=(MsgType.COUNT_SHARE,), timeout=60.0):
    """Send each party its frames; collect replies until one of ``until`` or ABORT arrives."""

    def one(p):
        for fr in frames[p]:
            channels[p].send(fr)
        got = []
        while True:
            fr = channels[p].recv(timeout)
            got.append(fr)
            if fr.type in until or fr.type == MsgType.ABORT:
                return got

    with ThreadPoolExecutor(2) as pool:
        return tuple(pool.map(one, (0, 1)))


def abort_info(frames) -> dict | None:
    for fr in frames:
        if fr.type == MsgType.ABORT:
            return json.loads(fr.payload)
    return None


def new_qid() -> bytes:
    return os.urandom(16)
