"""User side: share the prompt, bisect the distance threshold, collect the result.

The user never sends its threshold in the clear.  Each iteration it generates
a gate key for the ray ``[offset(d_k), p)`` and sends one half to each
server; the servers return shares of the number of documents whose distance
is at least ``d_k``.  The threshold is bisected until that count lands in
``[k, k + xi]``.

CLI: ``python -m fssrag.client --servers H:P,H:P --prompt vec.f64 --k 8 --xi 8``.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import struct
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import dot, gate, wide
from .errors import ConfigurationError, ProtocolAbort, ProtocolError, ServerInconsistencyError
from .field import FieldParams, vadd
from .prg import as_rng
from .wire import Channel, Frame, MsgType, SocketChannel

_ACK = struct.Struct("<QIIQI")
_U64 = np.dtype("<u8")


@dataclass(frozen=True)
class BisectState:
    """Threshold bracket ``d_l <= d_k <= d_r`` in signed fixed-point units."""

    d_l: int
    d_r: int
    d_k: int
    k: int
    xi: int
    step: int = 0
    history: tuple = ()

    @classmethod
    def initial(cls, params: FieldParams, k: int, xi: int) -> "BisectState":
        if k < 1:
            raise ConfigurationError("k must be at least 1")
        if not 0 <= xi <= k:
            raise ConfigurationError(f"slack xi={xi} must satisfy 0 <= xi <= k={k}")
        bound = params.scale  # distances of unit vectors lie in [-2^f, 2^f]
        return cls(-bound, bound, 0, k, xi)


@dataclass(frozen=True)
class StepOutcome:
    stop: bool
    state: BisectState
    stalled: bool = False


def bisect_step(state: BisectState, c: int) -> StepOutcome:
    """Apply one received count: stop iff ``0 <= c - k <= xi``, else move the threshold.

    Too many documents (``c > k``) raise the threshold, too few lower it.
    ``stalled`` is set when the midpoint no longer moves (bracket of width 1).
    """
    history = state.history + (int(c),)
    step = state.step + 1
    if 0 <= c - state.k <= state.xi:
        return StepOutcome(True, replace(state, step=step, history=history))
    if c > state.k:
        d_l, d_r = state.d_k, state.d_r
    else:
        d_l, d_r = state.d_l, state.d_k
    d_k = (d_l + d_r) // 2
    new = BisectState(d_l, d_r, d_k, state.k, state.xi, step, history)
    return StepOutcome(False, new, stalled=d_k == state.d_k)


def leakage_bits(counts: int, N: int) -> float:
    return counts * math.log2(N + 1)


@dataclass
class RetrievalResult:
    indices: np.ndarray
    c: int
    S: int  # counts received by the user
    iterations: int  # gate keys sent
    N: int
    k: int
    xi: int
    threshold: int
    stopped: str  # "rule", "stalled", "server-limit" or "client-limit"
    rounds: int
    bytes_up: int
    bytes_down: int
    traffic: dict = field(default_factory=dict)
    history: tuple = ()
    qid: bytes = b""

    @property
    def leakage_bits(self) -> float:
        return leakage_bits(self.S, self.N)

    def as_dict(self) -> dict:
        return {
            "indices": [int(i) for i in self.indices],
            "c": self.c,
            "S": self.S,
            "iterations": self.iterations,
            "N": self.N,
            "k": self.k,
            "xi": self.xi,
            "threshold": self.threshold,
            "stopped": self.stopped,
            "rounds": self.rounds,
            "bytes_up": self.bytes_up,
            "bytes_down": self.bytes_down,
            "leakage_bits": self.leakage_bits,
            "history": list(self.history),
            "traffic": self.traffic,
        }


def leakage_report(result: RetrievalResult) -> dict:
    """Physical leakage bound (bits) and functional leakage (documents revealed)."""
    return {
        "physical_bits": leakage_bits(result.S, result.N),
        "counts_received": result.S,
        "functional_documents": int(result.c),
        "functional_bound": result.k + result.xi,
    }


@dataclass
class _Reply:
    ack: bytes | None = None
    count: int | None = None
    forced: bool = False
    dc: np.ndarray | None = None
    abort: dict | None = None


class _Conversation:
    """One query's frames with both servers; each step is one round trip."""

    def __init__(self, channels: tuple[Channel, Channel], qid: bytes, timeout: float | None):
        self.channels = channels
        self.qid = qid
        self.timeout = timeout
        self.rounds = 0
        self._pool = ThreadPoolExecutor(2)

    def _one(self, party: int, frames: list[Frame], want_ack: bool, want: str) -> _Reply:
        ch = self.channels[party]
        for fr in frames:
            ch.send(fr)
        rep = _Reply()
        while True:
            fr = ch.recv(self.timeout)
            if fr.qid != self.qid:
                continue
            if fr.type == MsgType.ABORT:
                rep.abort = json.loads(fr.payload.decode() or "{}")
                return rep
            if fr.type == MsgType.ACK and want_ack and rep.ack is None:
                rep.ack = fr.payload
            elif fr.type == MsgType.COUNT_SHARE and want == "count":
                if len(fr.payload) != 8:
                    raise ProtocolError("count share must be 8 bytes")
                rep.count = struct.unpack("<Q", fr.payload)[0]
            elif fr.type == MsgType.FINALIZE and want == "count":
                rep.forced = True
                want = "dc"
                continue
            elif fr.type == MsgType.DC_SHARE and want == "dc":
                if len(fr.payload) % 8:
                    raise ProtocolError("candidate share is not a whole number of field elements")
                rep.dc = np.frombuffer(fr.payload, dtype=_U64).copy()
            else:
                raise ProtocolError(f"unexpected {fr.type.name} from server {party}")
            if (rep.ack is not None or not want_ack) and (rep.count is not None or rep.dc is not None):
                return rep

    def round(self, frames: tuple[list[Frame], list[Frame]], want_ack=False, want="count") -> tuple[_Reply, _Reply]:
        self.rounds += 1
        futs = [self._pool.submit(self._one, p, frames[p], want_ack, want) for p in (0, 1)]
        return futs[0].result(), futs[1].result()

    def close(self):
        self._pool.shutdown(wait=False)


def _check_abort(replies, phase: str):
    for rep in replies:
        if rep.abort is not None:
            raise ProtocolAbort(rep.abort.get("reason", "protocol-error"), rep.abort.get("phase", phase), rep.abort.get("detail", ""))


def _iteration_keys(params: FieldParams, d_k: int, count: int, rng) -> tuple[bytes, bytes]:
    lo = params.to_offset(d_k % params.p)
    if count == 1:
        k0, k1 = gate.cmp_gen(params, lo, params.p, rng)
    else:
        k0, k1 = gate.cmp_gen(params, np.full(count, lo, dtype=object), np.full(count, params.p, dtype=object), rng)
    return gate.cmp_key_serialize(k0), gate.cmp_key_serialize(k1)


def run_query(
    channels: tuple[Channel, Channel],
    prompt,
    k: int,
    xi: int,
    params: FieldParams | None = None,
    rng=None,
    fresh_masks: bool = False,
    N: int | None = None,
    max_iterations: int | None = None,
    qid: bytes | None = None,
    timeout: float | None = 600.0,
    norm_tol: float = 1e-3,
) -> RetrievalResult:
    """Run one private top-k retrieval against two servers.

    ``fresh_masks`` sends an independent gate key per document each iteration
    (hides distance differences from the servers at ``N`` times the key
    traffic; needs ``N``).  The first iteration key is pipelined with the
    prompt share, so a run with ``S`` counts costs ``S + 1`` round trips.
    """
    params = params or FieldParams()
    state = BisectState.initial(params, k, xi)
    prompt = np.asarray(prompt, dtype=np.float64)
    if prompt.ndim != 1 or not np.all(np.isfinite(prompt)):
        raise ConfigurationError("prompt embedding must be a finite vector")
    if abs(np.linalg.norm(prompt) - 1.0) > norm_tol:
        raise ConfigurationError("prompt embedding must be unit-norm")
    if fresh_masks and N is None:
        raise ConfigurationError("fresh_masks needs the database size N")
    rng = as_rng(rng)
    qid = qid or rng.bytes(16)
    n_keys = N if fresh_masks else 1

    seed, share1 = dot.share_prompt(params, prompt, rng)
    key0, key1 = _iteration_keys(params, state.d_k, n_keys, rng)
    sent_dk = state.d_k  # threshold of the last key sent; the candidate vector reflects it
    conv = _Conversation(channels, qid, timeout)
    try:
        replies = conv.round(
            (
                [Frame(MsgType.PROMPT_SHARE, qid, seed), Frame(MsgType.ITER_KEY, qid, key0)],
                [Frame(MsgType.PROMPT_SHARE, qid, wide.pack(share1)), Frame(MsgType.ITER_KEY, qid, key1)],
            ),
            want_ack=True,
        )
        _check_abort(replies, "init")
        acks = [_ACK.unpack(r.ack) for r in replies]
        if acks[0][:3] != acks[1][:3]:
            raise ServerInconsistencyError(f"servers disagree on database or material: {acks}")
        n_docs = acks[0][0]
        if N is not None and N != n_docs:
            raise ConfigurationError(f"servers hold {n_docs} documents, caller expected {N}")
        iterations = 1
        counts = 0
        stopped = None
        while True:
            if replies[0].forced != replies[1].forced:
                raise ServerInconsistencyError("only one server finalized")
            if replies[0].forced:
                stopped = "server-limit"
                break
            c = (replies[0].count + replies[1].count) % params.p
            counts += 1
            if c > n_docs:
                raise ServerInconsistencyError(f"count {c} exceeds database size {n_docs}")
            out = bisect_step(state, c)
            state = out.state
            if out.stop:
                stopped = "rule"
            elif out.stalled:
                stopped = "stalled"
            elif max_iterations is not None and iterations >= max_iterations:
                stopped = "client-limit"
            if stopped:
                replies = conv.round(([Frame(MsgType.FINALIZE, qid)], [Frame(MsgType.FINALIZE, qid)]), want="dc")
                break
            key0, key1 = _iteration_keys(params, state.d_k, n_keys, rng)
            sent_dk = state.d_k
            replies = conv.round(([Frame(MsgType.ITER_KEY, qid, key0)], [Frame(MsgType.ITER_KEY, qid, key1)]))
            _check_abort(replies, "iterating")
            iterations += 1
        _check_abort(replies, "finalizing")
        dc0, dc1 = replies[0].dc, replies[1].dc
        if dc0 is None or dc1 is None or dc0.size != n_docs or dc1.size != n_docs:
            raise ServerInconsistencyError("candidate shares missing or of the wrong length")
        dc = vadd(params, dc0, dc1)
        if np.any(dc > 1):
            raise ServerInconsistencyError("reconstructed candidate vector is not 0/1")
        indices = np.flatnonzero(dc == 1)
        up = sum(ch.meter.bytes(qid, "sent") for ch in channels)
        down = sum(ch.meter.bytes(qid, "recv") for ch in channels)
        traffic = {p: channels[p].meter.snapshot(qid) for p in (0, 1)}
        return RetrievalResult(
            indices=indices,
            c=int(indices.size),
            S=counts,
            iterations=iterations,
            N=n_docs,
            k=k,
            xi=xi,
            threshold=sent_dk,
            stopped=stopped,
            rounds=conv.rounds,
            bytes_up=up,
            bytes_down=down,
            traffic=traffic,
            history=state.history,
            qid=qid,
        )
    finally:
        conv.close()


# -- CLI ---------------------------------------------------------------------------------


def _endpoint(s: str) -> tuple[str, int]:
    host, _, port = s.strip().rpartition(":")
    return host or "127.0.0.1", int(port)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="python -m fssrag.client", description="Private top-k retrieval client")
    ap.add_argument("--servers", required=True, help="host:port of server 0 and server 1, comma-separated")
    ap.add_argument("--params", help="JSON file with p, f, n (defaults: 2^64-59, 32, 64)")
    ap.add_argument("--prompt", required=True, help="prompt embedding: raw float64 file or text list")
    ap.add_argument("--k", type=int, required=True)
    ap.add_argument("--xi", type=int, default=0)
    ap.add_argument("--fresh-masks", action="store_true", help="one gate key per document per iteration")
    ap.add_argument("--n-docs", type=int, help="database size (required with --fresh-masks)")
    ap.add_argument("--output", choices=("text", "json"), default="text")
    ap.add_argument("--metrics", help="write bytes/rounds/S/leakage as key=value lines to this path")
    ap.add_argument("--timeout", type=float, default=600.0)
    args = ap.parse_args(argv)

    from .ingest import read_vector

    pj = json.loads(Path(args.params).read_text()) if args.params else {}
    params = FieldParams(**{k: pj[k] for k in ("p", "f", "n") if k in pj})
    servers = [_endpoint(s) for s in args.servers.split(",")]
    if len(servers) != 2:
        ap.error("--servers needs exactly two endpoints")
    channels = tuple(SocketChannel.connect(h, p) for h, p in servers)
    try:
        result = run_query(
            channels,
            read_vector(args.prompt),
            args.k,
            args.xi,
            params,
            rng=os.urandom(32),
            fresh_masks=args.fresh_masks,
            N=args.n_docs,
            timeout=args.timeout,
        )
    except ProtocolAbort as exc:
        print(f"aborted: reason={exc.reason} phase={exc.phase} {exc.detail}", file=sys.stderr)
        return 2
    finally:
        for ch in channels:
            ch.close()
    if args.output == "json":
        print(json.dumps(result.as_dict()))
    else:
        print(" ".join(str(int(i)) for i in result.indices))
    if args.metrics:
        rep = leakage_report(result)
        lines = {
            "bytes_up": result.bytes_up,
            "bytes_down": result.bytes_down,
            "rounds": result.rounds,
            "S": result.S,
            "iterations": result.iterations,
            "c": result.c,
            "stopped": result.stopped,
            "leakage_bits": f"{rep['physical_bits']:.3f}",
        }
        Path(args.metrics).write_text("".join(f"{k}={v}\n" for k, v in lines.items()))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
