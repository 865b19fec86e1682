"""Framed binary messages between the user and servers and between servers.

Frame layout::

    length u32 (payload bytes) | type u8 | query id 16B | payload

Every byte that crosses a channel is counted by a :class:`TrafficMeter`,
keyed by query id and message type, so tests can compare measured volumes
with closed-form predictions.
"""

from __future__ import annotations

import enum
import queue
import socket
import struct
import threading
from collections import defaultdict
from dataclasses import dataclass

from .errors import DecodeError, ProtocolAbort, ProtocolError

HEADER = struct.Struct("<IB16s")
HEADER_BYTES = HEADER.size
MAX_PAYLOAD = 1 << 31
NULL_QID = bytes(16)


class MsgType(enum.IntEnum):
    PROMPT_SHARE = 1
    ACK = 2
    ITER_KEY = 3
    COUNT_SHARE = 4
    FINALIZE = 5
    DC_SHARE = 6
    ABORT = 7
    PEER_OPEN_BATCH = 8
    PEER_PUBLIC_BATCH = 9
    STATS = 10


@dataclass(frozen=True)
class Frame:
    type: MsgType
    qid: bytes
    payload: bytes = b""

    def encode(self) -> bytes:
        if len(self.qid) != 16:
            raise ProtocolError("query id must be 16 bytes")
        return HEADER.pack(len(self.payload), int(self.type), self.qid) + self.payload

    @property
    def size(self) -> int:
        return HEADER_BYTES + len(self.payload)


def decode_header(data: bytes) -> tuple[int, MsgType, bytes]:
    if len(data) != HEADER_BYTES:
        raise DecodeError("short frame header")
    length, mtype, qid = HEADER.unpack(data)
    try:
        mtype = MsgType(mtype)
    except ValueError:
        raise DecodeError(f"unknown message type {mtype}") from None
    if length > MAX_PAYLOAD:
        raise DecodeError(f"frame payload of {length} bytes exceeds limit")
    return length, mtype, qid


def decode_frame(data: bytes) -> Frame:
    length, mtype, qid = decode_header(data[:HEADER_BYTES])
    if len(data) != HEADER_BYTES + length:
        raise DecodeError("frame length does not match payload")
    return Frame(mtype, qid, bytes(data[HEADER_BYTES:]))


class TrafficMeter:
    """Thread-safe byte and message counters per (query id, direction, type)."""

    def __init__(self):
        self._lock = threading.Lock()
        self._bytes = defaultdict(int)
        self._msgs = defaultdict(int)

    def record(self, qid: bytes, direction: str, mtype: MsgType, nbytes: int):
        with self._lock:
            self._bytes[(qid, direction, mtype)] += nbytes
            self._msgs[(qid, direction, mtype)] += 1

    def bytes(self, qid: bytes | None = None, direction: str | None = None, mtype=None) -> int:
        return self._select(self._bytes, qid, direction, mtype)

    def messages(self, qid: bytes | None = None, direction: str | None = None, mtype=None) -> int:
        return self._select(self._msgs, qid, direction, mtype)

    def _select(self, table, qid, direction, mtype):
        with self._lock:
            return sum(
                v
                for (q, d, t), v in table.items()
                if (qid is None or q == qid)
                and (direction is None or d == direction)
                and (mtype is None or t == mtype)
            )

    def snapshot(self, qid: bytes | None = None) -> dict:
        """``{"sent": {type: bytes}, "recv": {...}}`` for one query (or all)."""
        out: dict = {"sent": {}, "recv": {}}
        with self._lock:
            for (q, d, t), v in self._bytes.items():
                if qid is None or q == qid:
                    out[d][t.name] = out[d].get(t.name, 0) + v
        return out


class Channel:
    """Bidirectional frame channel; subclasses implement the transport."""

    def __init__(self, meter: TrafficMeter | None = None):
        self.meter = meter or TrafficMeter()
        self._send_lock = threading.Lock()

    def send(self, frame: Frame) -> None:
        data = frame.encode()
        with self._send_lock:
            self._send_bytes(data)
        self.meter.record(frame.qid, "sent", frame.type, len(data))

    def recv(self, timeout: float | None = None) -> Frame:
        frame = self._recv_frame(timeout)
        self.meter.record(frame.qid, "recv", frame.type, frame.size)
        return frame

    def _send_bytes(self, data: bytes) -> None:
        raise NotImplementedError

    def _recv_frame(self, timeout) -> Frame:
        raise NotImplementedError

    def close(self) -> None:
        pass


class ChannelClosed(ProtocolError):
    pass


class QueueChannel(Channel):
    """In-process channel end; frames still go through encode/decode."""

    _CLOSE = object()

    def __init__(self, inbox: queue.Queue, outbox: queue.Queue, meter=None):
        super().__init__(meter)
        self._inbox = inbox
        self._outbox = outbox

    @classmethod
    def pair(cls) -> tuple["QueueChannel", "QueueChannel"]:
        a, b = queue.Queue(), queue.Queue()
        return cls(a, b), cls(b, a)

    def _send_bytes(self, data: bytes) -> None:
        self._outbox.put(data)

    def _recv_frame(self, timeout) -> Frame:
        try:
            data = self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise ProtocolError("timed out waiting for a frame") from None
        if data is self._CLOSE:
            self._inbox.put(data)
            raise ChannelClosed("channel closed")
        return decode_frame(data)

    def close(self) -> None:
        self._outbox.put(self._CLOSE)


class SocketChannel(Channel):
    def __init__(self, sock: socket.socket, meter=None):
        super().__init__(meter)
        self.sock = sock
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._recv_lock = threading.Lock()

    @classmethod
    def connect(cls, host: str, port: int, timeout: float = 30.0, meter=None) -> "SocketChannel":
        sock = socket.create_connection((host, port), timeout=timeout)
        sock.settimeout(None)
        return cls(sock, meter)

    def _send_bytes(self, data: bytes) -> None:
        try:
            self.sock.sendall(data)
        except OSError as exc:
            raise ChannelClosed(f"send failed: {exc}") from exc

    def _read_exact(self, n: int) -> bytes:
        buf = bytearray()
        while len(buf) < n:
            try:
                chunk = self.sock.recv(min(n - len(buf), 1 << 20))
            except socket.timeout:
                raise ProtocolError("timed out waiting for a frame") from None
            except OSError as exc:
                raise ChannelClosed(f"receive failed: {exc}") from exc
            if not chunk:
                raise ChannelClosed("connection closed by peer")
            buf += chunk
        return bytes(buf)

    def _recv_frame(self, timeout) -> Frame:
        with self._recv_lock:
            self.sock.settimeout(timeout)
            try:
                length, mtype, qid = decode_header(self._read_exact(HEADER_BYTES))
                self.sock.settimeout(None)
                payload = self._read_exact(length)
            finally:
                self.sock.settimeout(None)
        return Frame(mtype, qid, payload)

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


# -- server-to-server exchange ----------------------------------------------------

_PEER = struct.Struct("<IB")


class PeerTag(enum.IntEnum):
    SETUP = 0
    PROMPT_OPEN = 1
    TRUNC_OPEN = 2
    ITER_OPEN = 3
    VERIFY_OPEN = 4
    VERIFY_PUBLIC = 5


class PeerLink:
    """Request-free symmetric exchange with the other server, demultiplexed by query id.

    Messages carry ``(step, tag)``; receiving anything else for the query
    is a protocol error.  An ABORT frame from the peer surfaces as :class:`ProtocolAbort`.
    """

    def __init__(self, channel: Channel, timeout: float = 120.0):
        self.channel = channel
        self.timeout = timeout
        self._boxes: dict[bytes, queue.Queue] = defaultdict(queue.Queue)
        self._lock = threading.Lock()
        self._closed = False
        self.tag_bytes: dict = defaultdict(int)  # (qid, tag name) -> bytes sent
        self._reader = threading.Thread(target=self._pump, name="peer-reader", daemon=True)
        self._reader.start()

    def _box(self, qid: bytes) -> queue.Queue:
        with self._lock:
            return self._boxes[qid]

    def _pump(self):
        while True:
            try:
                frame = self.channel.recv()
            except (ProtocolError, DecodeError):
                self._closed = True
                with self._lock:
                    boxes = list(self._boxes.values())
                for box in boxes:
                    box.put(None)
                return
            self._box(frame.qid).put(frame)

    def send(self, qid: bytes, step: int, tag: PeerTag, data: bytes, public: bool = False) -> None:
        mtype = MsgType.PEER_PUBLIC_BATCH if public else MsgType.PEER_OPEN_BATCH
        if self._closed:
            raise ProtocolError("peer link is closed")
        frame = Frame(mtype, qid, _PEER.pack(step, int(tag)) + data)
        self.channel.send(frame)
        with self._lock:
            self.tag_bytes[(qid, tag.name)] += frame.size

    def tag_totals(self, qid: bytes) -> dict:
        with self._lock:
            return {t: v for (q, t), v in self.tag_bytes.items() if q == qid}

    def receive(self, qid: bytes, step: int, tag: PeerTag, public: bool = False) -> bytes:
        mtype = MsgType.PEER_PUBLIC_BATCH if public else MsgType.PEER_OPEN_BATCH
        try:
            frame = self._box(qid).get(timeout=self.timeout)
        except queue.Empty:
            raise ProtocolError(f"peer timed out at step {step} ({tag.name})") from None
        if frame is None:
            raise ProtocolError("peer link closed")
        if frame.type == MsgType.ABORT:
            reason, _, detail = frame.payload.decode(errors="replace").partition(":")
            raise ProtocolAbort(reason or "protocol-error", "peer", detail)
        if frame.type != mtype or len(frame.payload) < _PEER.size:
            raise ProtocolError(f"unexpected {frame.type.name} from peer")
        p_step, p_tag = _PEER.unpack_from(frame.payload)
        if (p_step, p_tag) != (step, int(tag)):
            raise ProtocolError(f"peer at step {p_step}/{p_tag}, expected {step}/{int(tag)}")
        return frame.payload[_PEER.size :]

    def exchange(self, qid: bytes, step: int, tag: PeerTag, data: bytes, public: bool = False) -> bytes:
        """Send this server's contribution and return the peer's for the same step."""
        self.send(qid, step, tag, data, public)
        return self.receive(qid, step, tag, public)

    def abort(self, qid: bytes, reason: str, detail: str = ""):
        try:
            self.channel.send(Frame(MsgType.ABORT, qid, f"{reason}:{detail}".encode()))
        except ProtocolError:
            pass

    def discard(self, qid: bytes):
        with self._lock:
            self._boxes.pop(qid, None)

    def close(self):
        self.channel.close()
