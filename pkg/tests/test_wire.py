import socket
import threading

import pytest

from fssrag.errors import DecodeError, ProtocolAbort, ProtocolError
from fssrag.wire import (
    HEADER_BYTES,
    NULL_QID,
    ChannelClosed,
    Frame,
    MsgType,
    PeerLink,
    PeerTag,
    QueueChannel,
    SocketChannel,
    TrafficMeter,
    decode_frame,
    decode_header,
)

QID = bytes(range(16))


def test_frame_layout():
    fr = Frame(MsgType.ITER_KEY, QID, b"abc")
    data = fr.encode()
    assert HEADER_BYTES == 21 and len(data) == 24 == fr.size
    assert data[:4] == (3).to_bytes(4, "little") and data[4] == 3 and data[5:21] == QID
    assert decode_frame(data) == fr


def test_decode_errors():
    with pytest.raises(DecodeError):
        decode_header(b"\x00" * 5)
    with pytest.raises(DecodeError):
        decode_header((0).to_bytes(4, "little") + b"\x63" + QID)
    with pytest.raises(DecodeError):
        decode_header((2**31 + 1).to_bytes(4, "little") + b"\x01" + QID)
    with pytest.raises(DecodeError):
        decode_frame(Frame(MsgType.ACK, QID, b"xy").encode()[:-1])
    with pytest.raises(ProtocolError):
        Frame(MsgType.ACK, b"short").encode()


def test_meter_counts_both_directions():
    a, b = QueueChannel.pair()
    a.send(Frame(MsgType.PROMPT_SHARE, QID, b"x" * 10))
    b.recv(1)
    assert a.meter.bytes(QID, "sent", MsgType.PROMPT_SHARE) == 31
    assert b.meter.bytes(QID, "recv") == 31 and b.meter.messages(QID) == 1
    assert a.meter.snapshot(QID) == {"sent": {"PROMPT_SHARE": 31}, "recv": {}}
    assert TrafficMeter().bytes() == 0


def test_queue_channel_timeout_and_close():
    a, b = QueueChannel.pair()
    with pytest.raises(ProtocolError):
        b.recv(0.01)
    a.close()
    with pytest.raises(ChannelClosed):
        b.recv(1)


def test_socket_channel_roundtrip():
    srv = socket.create_server(("127.0.0.1", 0))
    port = srv.getsockname()[1]
    got = []

    def serve():
        conn, _ = srv.accept()
        ch = SocketChannel(conn)
        fr = ch.recv()
        ch.send(Frame(MsgType.ACK, fr.qid, fr.payload[::-1]))
        got.append(fr)
        ch.close()

    th = threading.Thread(target=serve)
    th.start()
    cli = SocketChannel.connect("127.0.0.1", port)
    payload = bytes(range(256)) * 4000
    cli.send(Frame(MsgType.PROMPT_SHARE, QID, payload))
    back = cli.recv(5)
    assert back.payload == payload[::-1]
    th.join()
    with pytest.raises(ChannelClosed):
        cli.recv(5)
    cli.close()
    srv.close()


def peers():
    a, b = QueueChannel.pair()
    return PeerLink(a, timeout=2), PeerLink(b, timeout=2)


def test_peer_exchange_is_symmetric():
    p0, p1 = peers()
    out = {}
    th = threading.Thread(target=lambda: out.setdefault(1, p1.exchange(QID, 1, PeerTag.ITER_OPEN, b"B")))
    th.start()
    out[0] = p0.exchange(QID, 1, PeerTag.ITER_OPEN, b"A")
    th.join()
    assert out == {0: b"B", 1: b"A"}
    assert p0.tag_totals(QID) == {"ITER_OPEN": HEADER_BYTES + 5 + 1}


def test_peer_step_mismatch_and_abort():
    p0, p1 = peers()
    p1.send(QID, 2, PeerTag.ITER_OPEN, b"")
    with pytest.raises(ProtocolError):
        p0.receive(QID, 1, PeerTag.ITER_OPEN)
    p1.abort(QID, "binary-check", "x")
    with pytest.raises(ProtocolAbort) as exc:
        p0.receive(QID, 1, PeerTag.ITER_OPEN)
    assert exc.value.reason == "binary-check"
    p1.send(QID, 1, PeerTag.VERIFY_PUBLIC, b"", public=True)
    with pytest.raises(ProtocolError):
        p0.receive(QID, 1, PeerTag.VERIFY_PUBLIC, public=False)


def test_peer_demultiplexes_queries_and_times_out():
    p0, p1 = peers()
    q2 = bytes(16 * [9])
    p1.send(q2, 1, PeerTag.SETUP, b"second")
    p1.send(NULL_QID, 1, PeerTag.SETUP, b"first")
    assert p0.receive(NULL_QID, 1, PeerTag.SETUP) == b"first"
    assert p0.receive(q2, 1, PeerTag.SETUP) == b"second"
    p0.timeout = 0.05
    with pytest.raises(ProtocolError):
        p0.receive(q2, 2, PeerTag.SETUP)
    p1.close()
    with pytest.raises(ProtocolError):
        p0.receive(QID, 1, PeerTag.SETUP)
