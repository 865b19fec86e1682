"""Retrieval server: distance computation, bisection iterations, verification.

Each server holds one share of the document database and one dealer bundle.
Per query the user sends its prompt share, then one gate key per bisection
iteration; the servers count documents whose distance is at or above the
user's threshold and return count shares.  On FINALIZE (or when the server's
iteration cap is reached) the servers check that every candidate flag is 0/1
and that the candidate count is at most ``c_m`` before returning their shares
of the candidate vector.

Run as a daemon with ``python -m fssrag.server --config server.json``.
"""

from __future__ import annotations

import argparse
import json
import logging
import socket
import struct
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import dot, gate, wide
from .dealer import OfflineBundle, QueryMaterial, bundle_load
from .errors import (
    BundleError,
    ConfigurationError,
    DecodeError,
    KeyReuseError,
    ProtocolAbort,
    ProtocolError,
    ShareUsageError,
)
from .field import FieldParams, vadd, vsum
from .ingest import ShareDatabase
from .prg import SEED_BYTES
from .wire import NULL_QID, Channel, Frame, MsgType, PeerLink, PeerTag, SocketChannel

log = logging.getLogger(__name__)

_ACK = struct.Struct("<QIIQI")  # N, m, material index, c_m, step_m
_INDEX = struct.Struct("<I")
_U64 = np.dtype("<u8")
EVAL_CHUNK = 1 << 14


@dataclass
class ServerConfig:
    """Daemon settings; loaded from a JSON file, then overridden by flags."""

    party: int = 0
    listen: str = "127.0.0.1:7000"
    peer: str = "127.0.0.1:7100"
    db_path: str = ""
    bundle_path: str = ""
    step_m: int | None = None
    c_m: int | None = None
    xi: int | None = None
    p: int = FieldParams.p
    f: int = FieldParams.f
    n: int = FieldParams.n
    workers: int = 1
    peer_timeout: float = 300.0
    save_doc_masks: bool = True
    stats_path: str = ""

    @classmethod
    def from_file(cls, path) -> "ServerConfig":
        data = json.loads(Path(path).read_text())
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def validate(self) -> None:
        if self.party not in (0, 1):
            raise ConfigurationError("party must be 0 or 1")
        if self.step_m is not None and self.step_m < 1:
            raise ConfigurationError("step_m must be >= 1")
        if self.workers < 1:
            raise ConfigurationError("workers must be >= 1")


def _addr(s: str) -> tuple[str, int]:
    host, _, port = s.rpartition(":")
    return host or "127.0.0.1", int(port)


@dataclass
class QuerySession:
    qid: bytes
    phase: str = "init"
    step: int = 0
    material: QueryMaterial | None = None
    d_off: np.ndarray | None = field(default=None, repr=False)
    dc: np.ndarray | None = field(default=None, repr=False)
    c_share: int = 0
    peer_rounds: int = 0
    counts_sent: int = 0
    cpu_seconds: float = 0.0
    abort_reason: str | None = None

    def release(self):
        self.material = None
        self.d_off = None
        self.dc = None


class Server:
    """One party's server logic, independent of the client transport."""

    def __init__(
        self,
        party: int,
        params: FieldParams,
        db: ShareDatabase,
        bundle: OfflineBundle,
        peer: PeerLink,
        step_m: int | None = None,
        c_m: int | None = None,
        workers: int = 1,
        retain_distances: bool = False,
    ):
        """``retain_distances`` keeps each query's distance shares after the
        session ends so a test harness can reconstruct them; never enable it
        in deployment."""
        if db.party != party or bundle.party != party:
            raise ConfigurationError("database, bundle and server party disagree")
        meta = bundle.meta
        if (db.N, db.m) != (meta.N, meta.m):
            raise ConfigurationError(f"database is {db.N}x{db.m}, bundle provisioned for {meta.N}x{meta.m}")
        if bundle.params != params or db.params.p != params.p or db.params.f != params.f:
            raise ConfigurationError("field parameters disagree between config, database and bundle")
        if c_m is not None and c_m != meta.c_m:
            raise ConfigurationError(f"c_m={c_m} but the bundle's count gate was built for {meta.c_m}")
        self.party = party
        self.params = params
        self.db = db
        self.bundle = bundle
        self.peer = peer
        self.step_m = meta.step_m if step_m is None else step_m
        self.c_m = meta.c_m
        self.N, self.m = db.N, db.m
        self.rb = bundle.static_rb()
        self.sessions: dict[bytes, QuerySession] = {}
        self._lock = threading.Lock()
        self._pool = ThreadPoolExecutor(workers) if workers > 1 else None
        self.retain_distances = retain_distances
        self.retained: dict[bytes, np.ndarray] = {}

    # -- setup -------------------------------------------------------------------

    def setup_doc_masks(self) -> bool:
        """Open ``e = x - r^b`` with the peer unless both sides already hold it.

        Returns True when the differences were (re)computed.
        """
        have = self.db.doc_masks is not None
        theirs = self.peer.exchange(NULL_QID, 0, PeerTag.SETUP, bytes([have]))
        if have and theirs == b"\x01":
            return False
        mine = dot.doc_mask_contribution(self.db.shares, self.rb)
        other = wide.unpack(self.peer.exchange(NULL_QID, 1, PeerTag.SETUP, wide.pack(mine)), (self.N, self.m))
        self.db = self.db.with_doc_masks(dot.precompute_doc_masks(mine, other))
        return True

    # -- helpers -----------------------------------------------------------------

    def _exchange(self, s: QuerySession, tag: PeerTag, data: bytes, public=False) -> bytes:
        s.peer_rounds += 1
        return self.peer.exchange(s.qid, s.peer_rounds, tag, data, public)

    def _field_vec(self, data: bytes, count: int) -> np.ndarray:
        if len(data) != 8 * count:
            raise ProtocolError(f"peer sent {len(data)} bytes, expected {8 * count}")
        v = np.frombuffer(data, dtype=_U64)
        if np.any(v >= np.uint64(self.params.p)):
            raise ProtocolError("peer value outside the field")
        return v

    def _finish(self, key: gate.CmpKey, xhat: np.ndarray) -> np.ndarray:
        """Gate outputs over ``xhat``, chunked and optionally parallel."""
        n = xhat.size
        spans = [(a, min(a + EVAL_CHUNK, n)) for a in range(0, n, EVAL_CHUNK)]

        def run(span):
            a, b = span
            k = key if len(key) == 1 else key[a:b]
            return gate.cmp_eval_finish(self.params, k, xhat[a:b])

        parts = list(self._pool.map(run, spans)) if self._pool else [run(s) for s in spans]
        return np.concatenate(parts) if parts else np.zeros(0, dtype=_U64)

    def _session(self, qid: bytes, create=False) -> QuerySession:
        with self._lock:
            s = self.sessions.get(qid)
            if create:
                if s is not None:
                    raise ProtocolError("duplicate query id")
                s = self.sessions[qid] = QuerySession(qid)
            elif s is None:
                raise ProtocolError("unknown query id")
        return s

    # -- protocol steps ----------------------------------------------------------------

    def handle_init(self, qid: bytes, payload: bytes) -> bytes:
        s = self._session(qid, create=True)
        if self.party == 0:
            if len(payload) != SEED_BYTES:
                raise ProtocolError(f"party 0 prompt share must be a {SEED_BYTES}-byte seed")
            prompt = dot.prompt_share_from_seed(payload, self.m)
        else:
            if len(payload) != self.m * wide.ELEM_BYTES:
                raise ProtocolError(f"prompt share has {len(payload) // wide.ELEM_BYTES} dims, database has {self.m}")
            try:
                prompt = wide.unpack(payload, self.m)
            except DecodeError as exc:
                raise ProtocolError(str(exc)) from exc

        # Party 0 picks the offline slot and tells party 1 alongside its opening.
        s.peer_rounds += 1
        if self.party == 0:
            s.material = self.bundle.acquire_query()
            mine = dot.open_prompt_masks(prompt, s.material.dot)
            self.peer.send(qid, s.peer_rounds, PeerTag.PROMPT_OPEN, _INDEX.pack(s.material.index) + wide.pack(mine))
            other = self.peer.receive(qid, s.peer_rounds, PeerTag.PROMPT_OPEN)
        else:
            msg = self.peer.receive(qid, s.peer_rounds, PeerTag.PROMPT_OPEN)
            if len(msg) < _INDEX.size:
                raise ProtocolError("prompt opening without a material index")
            (index,) = _INDEX.unpack_from(msg)
            s.material = self.bundle.acquire_query(index)
            mine = dot.open_prompt_masks(prompt, s.material.dot)
            self.peer.send(qid, s.peer_rounds, PeerTag.PROMPT_OPEN, wide.pack(mine))
            other = msg[_INDEX.size :]
        corr = s.material.dot
        d = dot.publish(mine, wide.unpack(other, self.m))
        z = dot.dot_finish(self.party, d, self.db.doc_masks, corr, self.rb)
        mine = dot.trunc_open(self.params, self.party, z, corr)
        u = dot.publish(mine, wide.unpack(self._exchange(s, PeerTag.TRUNC_OPEN, wide.pack(mine)), self.N))
        dist = dot.trunc_finish(self.params, self.party, u, corr)
        # Offset form so signed order becomes unsigned order; party 1 adds the constant.
        s.d_off = vadd(self.params, dist, np.uint64(self.params.half)) if self.party == 1 else dist
        if self.retain_distances:
            self.retained[qid] = dist
        s.phase = "iterating"
        return _ACK.pack(self.N, self.m, s.material.index, self.c_m, self.step_m)

    def handle_iteration(self, qid: bytes, payload: bytes) -> tuple[MsgType, bytes]:
        """Returns ``(COUNT_SHARE, share)`` or ``(FINALIZE, b"")`` when the cap is hit."""
        s = self._session(qid)
        if s.phase != "iterating":
            raise ProtocolError(f"iteration key in phase {s.phase!r}")
        try:
            key = gate.cmp_key_deserialize(payload, self.params)
        except DecodeError as exc:
            raise ProtocolError(f"malformed gate key: {exc}") from exc
        if key.party != self.party or len(key) not in (1, self.N):
            raise ProtocolError(f"gate key batch of {len(key)} for party {key.party} does not fit {self.N} distances")
        mine = gate.cmp_eval_mask(self.params, key, s.d_off)
        other = self._field_vec(self._exchange(s, PeerTag.ITER_OPEN, mine.tobytes()), self.N)
        xhat = vadd(self.params, mine, other)
        s.dc = self._finish(key, xhat)
        s.c_share = vsum(self.params, s.dc)
        s.step += 1
        if s.step >= self.step_m:
            s.phase = "finalizing"
            return MsgType.FINALIZE, b""
        s.counts_sent += 1
        return MsgType.COUNT_SHARE, struct.pack("<Q", s.c_share)

    def handle_finalize(self, qid: bytes) -> bytes:
        """Verify the candidate vector; returns this party's share or raises ProtocolAbort."""
        s = self._session(qid)
        if s.phase not in ("iterating", "finalizing"):
            raise ProtocolError(f"finalize in phase {s.phase!r}")
        if s.step < 1 or s.dc is None:
            raise ProtocolError("finalize before any iteration")
        s.phase = "finalizing"
        mat = s.material
        if mat.n_binary != self.N:
            raise ConfigurationError("bundle lacks binary-check keys for every document")
        N, P = self.N, self.params
        contrib = np.empty(N + 1, dtype=_U64)
        for a in range(0, N, EVAL_CHUNK):
            b = min(a + EVAL_CHUNK, N)
            contrib[a:b] = gate.cmp_eval_mask(P, mat.binary_keys(a, b), s.dc[a:b])
        cnt_key = mat.count_key()
        contrib[N] = gate.cmp_eval_mask(P, cnt_key, np.array([s.c_share], dtype=_U64))[0]
        other = self._field_vec(self._exchange(s, PeerTag.VERIFY_OPEN, contrib.tobytes()), N + 1)
        xhat = vadd(P, contrib, other)
        out = np.empty(N + 1, dtype=_U64)
        for a in range(0, N, EVAL_CHUNK):
            b = min(a + EVAL_CHUNK, N)
            out[a:b] = self._finish(mat.binary_keys(a, b), xhat[a:b])
        out[N] = gate.cmp_eval_finish(P, cnt_key, xhat[N : N + 1])[0]
        other = self._field_vec(self._exchange(s, PeerTag.VERIFY_PUBLIC, out.tobytes(), public=True), N + 1)
        y = vadd(P, out, other)
        if np.any(y[:N] != 1):
            raise ProtocolAbort("binary-check", "finalizing", f"{int(np.sum(y[:N] != 1))} candidate flags not in {{0,1}}")
        if y[N] != 1:
            raise ProtocolAbort("count-bound", "finalizing", f"candidate count exceeds c_m={self.c_m}")
        s.phase = "done"
        share = s.dc.tobytes()
        s.release()
        return share

    # -- transport loop ------------------------------------------------------------------

    def _abort(self, channel: Channel, qid: bytes, reason: str, detail: str, notify_peer: bool):
        with self._lock:
            s = self.sessions.get(qid)
        if s is not None:
            phase = s.phase
            s.phase = "aborted"
            s.abort_reason = reason
            s.release()
        else:
            phase = "init"
        if notify_peer:
            self.peer.abort(qid, reason, detail)
        channel.send(Frame(MsgType.ABORT, qid, json.dumps({"reason": reason, "phase": phase, "detail": detail}).encode()))

    def handle_frame(self, channel: Channel, frame: Frame) -> None:
        qid = frame.qid
        t0 = time.thread_time()
        try:
            if frame.type == MsgType.STATS:
                channel.send(Frame(MsgType.STATS, qid, json.dumps(self.stats(qid)).encode()))
                return
            with self._lock:
                s = self.sessions.get(qid)
            if s is not None and s.phase in ("done", "aborted"):
                # Replays must not disturb the finished session or the peer.
                detail = f"session already {s.phase}"
                channel.send(Frame(MsgType.ABORT, qid, json.dumps({"reason": "protocol-error", "phase": s.phase, "detail": detail}).encode()))
                return
            if frame.type == MsgType.PROMPT_SHARE:
                channel.send(Frame(MsgType.ACK, qid, self.handle_init(qid, frame.payload)))
            elif frame.type == MsgType.ITER_KEY:
                mtype, payload = self.handle_iteration(qid, frame.payload)
                channel.send(Frame(mtype, qid, payload))
                if mtype == MsgType.FINALIZE:
                    channel.send(Frame(MsgType.DC_SHARE, qid, self.handle_finalize(qid)))
            elif frame.type == MsgType.FINALIZE:
                channel.send(Frame(MsgType.DC_SHARE, qid, self.handle_finalize(qid)))
            else:
                raise ProtocolError(f"unexpected {frame.type.name} from client")
        except ProtocolAbort as exc:
            # Verification failures are seen identically by both servers; a peer-reported
            # abort needs no echo.
            self._abort(channel, qid, exc.reason, exc.detail, notify_peer=False)
        except (ProtocolError, KeyReuseError, ShareUsageError, BundleError, ConfigurationError) as exc:
            log.warning("party %d aborting query %s: %s", self.party, qid.hex(), exc)
            self._abort(channel, qid, "protocol-error", str(exc), notify_peer=True)
        finally:
            with self._lock:
                s = self.sessions.get(qid)
            if s is not None:
                s.cpu_seconds += time.thread_time() - t0

    def serve(self, channel: Channel) -> None:
        """Handle one client connection until it closes."""
        while True:
            try:
                frame = channel.recv()
            except ProtocolError:
                return
            self.handle_frame(channel, frame)

    def stats(self, qid: bytes) -> dict:
        with self._lock:
            s = self.sessions.get(qid)
        meter = self.peer.channel.meter
        out = {
            "party": self.party,
            "peer_bytes_sent": meter.bytes(qid, "sent"),
            "peer_bytes_recv": meter.bytes(qid, "recv"),
            "peer_messages_sent": meter.messages(qid, "sent"),
            "peer_tag_bytes_sent": self.peer.tag_totals(qid),
        }
        if s is not None:
            out.update(
                phase=s.phase,
                step=s.step,
                peer_rounds=s.peer_rounds,
                counts_sent=s.counts_sent,
                cpu_seconds=s.cpu_seconds,
                abort_reason=s.abort_reason,
            )
        return out

    def close(self):
        if self._pool:
            self._pool.shutdown(wait=False)


# -- daemon ----------------------------------------------------------------------------


def _peer_channel(cfg: ServerConfig, retry_s: float = 60.0) -> SocketChannel:
    host, port = _addr(cfg.peer)
    if cfg.party == 0:
        with socket.create_server((host, port), reuse_port=False) as srv:
            conn, _ = srv.accept()
        return SocketChannel(conn)
    deadline = time.monotonic() + retry_s
    while True:
        try:
            return SocketChannel.connect(host, port)
        except OSError:
            if time.monotonic() > deadline:
                raise
            time.sleep(0.1)


def build_server(cfg: ServerConfig, peer: PeerLink) -> Server:
    cfg.validate()
    params = FieldParams(cfg.p, cfg.f, cfg.n)
    db = ShareDatabase.load(cfg.db_path, cfg.party, cfg.n)
    bundle = bundle_load(cfg.bundle_path, cfg.party)
    return Server(cfg.party, params, db, bundle, peer, cfg.step_m, cfg.c_m, cfg.workers)


def run_daemon(cfg: ServerConfig, ready: threading.Event | None = None) -> None:
    peer = PeerLink(_peer_channel(cfg), cfg.peer_timeout)
    server = build_server(cfg, peer)
    if server.setup_doc_masks() and cfg.save_doc_masks:
        server.db.save(cfg.db_path)
    host, port = _addr(cfg.listen)
    with socket.create_server((host, port)) as lsock:
        log.info("party %d serving on %s:%d", cfg.party, host, port)
        print(f"READY party={cfg.party} listen={host}:{port}", flush=True)
        if ready is not None:
            ready.set()
        while True:
            conn, _ = lsock.accept()
            threading.Thread(target=server.serve, args=(SocketChannel(conn),), daemon=True).start()


def parse_args(argv=None) -> ServerConfig:
    ap = argparse.ArgumentParser(prog="python -m fssrag.server", description="Retrieval server daemon")
    ap.add_argument("--config", help="JSON config file; flags below override it")
    ap.add_argument("--party", type=int)
    ap.add_argument("--listen")
    ap.add_argument("--peer")
    ap.add_argument("--db", dest="db_path")
    ap.add_argument("--bundle", dest="bundle_path")
    ap.add_argument("--step-m", dest="step_m", type=int)
    ap.add_argument("--c-m", dest="c_m", type=int)
    ap.add_argument("--xi", type=int)
    ap.add_argument("--workers", type=int)
    ap.add_argument("--peer-timeout", dest="peer_timeout", type=float)
    ap.add_argument("--log-level", default="WARNING")
    args = ap.parse_args(argv)
    logging.basicConfig(level=args.log_level)
    cfg = ServerConfig.from_file(args.config) if args.config else ServerConfig()
    for k, v in vars(args).items():
        if k in {f.name for f in fields(ServerConfig)} and v is not None:
            setattr(cfg, k, v)
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    run_daemon(parse_args(argv))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())


__all__ = ["ServerConfig", "QuerySession", "Server", "build_server", "run_daemon", "parse_args", "main"]
