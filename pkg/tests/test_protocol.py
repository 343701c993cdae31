import random
import struct

import pytest

from farm import protocol as P

from conftest import random_message


def test_heartbeat_layout():
    frame = P.encode_message(P.Heartbeat(client_id=7, seq=3))
    assert frame == struct.pack(">IBB", 16, 1, 0x08) + struct.pack(">QQ", 7, 3)


def test_drained_is_header_only():
    assert P.encode_message(P.Drained()) == b"\x00\x00\x00\x00\x01\x05"


@pytest.mark.parametrize("msg,tag", [
    (P.ClientHello(1), 0x01), (P.HelloAck(1, 2, 3), 0x02), (P.ChunkRequest(1, 2), 0x03),
    (P.TaskChunkMsg(1, ()), 0x04), (P.Drained(), 0x05), (P.ResultChunkMsg(1, ()), 0x06),
    (P.ResultAck(1), 0x07), (P.Heartbeat(1, 2), 0x08), (P.HeartbeatAck(1), 0x09),
    (P.ShutdownNotice(P.ShutdownReason.REJECTED), 0x0A),
])
def test_tag_assignment(msg, tag):
    frame = P.encode_message(msg)
    assert frame[5] == tag
    assert struct.unpack(">I", frame[:4])[0] == len(frame) - 6


def test_task_chunk_blob_layout():
    frame = P.encode_message(P.TaskChunkMsg(9, (b"ab", b"")))
    payload = struct.pack(">QI", 9, 2) + struct.pack(">I", 2) + b"ab" + struct.pack(">I", 0)
    assert frame == struct.pack(">IBB", len(payload), 1, 0x04) + payload


def test_empty_input_is_incomplete():
    with pytest.raises(P.Incomplete):
        P.decode_message(b"")


def test_reserved_tag():
    with pytest.raises(P.UnknownTag):
        P.decode_message(struct.pack(">IBB", 0, 1, 0xFF))


def test_version_checked_before_payload():
    # Declared length is bogus; the version must be rejected first.
    with pytest.raises(P.BadVersion):
        P.decode_message(struct.pack(">IBB", 3, 2, 0x08) + b"x")


def test_trailing_bytes_untouched():
    frame = P.encode_message(P.Heartbeat(5, 6))
    msg, used = P.decode_message(frame + b"\x01\x02\x03")
    assert msg == P.Heartbeat(5, 6)
    assert used == len(frame)


@pytest.mark.parametrize("body", [b"", b"\x00" * 15, b"\x00" * 17])
def test_wrong_fixed_length_is_malformed(body):
    with pytest.raises(P.MalformedPayload):
        P.decode_message(struct.pack(">IBB", len(body), 1, 0x08) + body)


def test_truncated_blob_is_malformed():
    payload = struct.pack(">QI", 1, 1) + struct.pack(">I", 10) + b"abc"
    with pytest.raises(P.MalformedPayload):
        P.decode_message(struct.pack(">IBB", len(payload), 1, 0x04) + payload)


def test_unknown_shutdown_reason():
    with pytest.raises(P.MalformedPayload):
        P.decode_message(struct.pack(">IBBB", 1, 1, 0x0A, 9))


def test_oversize():
    with pytest.raises(P.OversizePayload):
        P.encode_message(P.TaskChunkMsg(1, (bytes(P.MAX_PAYLOAD),)))
    with pytest.raises(P.OversizePayload):
        P.decode_message(struct.pack(">IBB", P.MAX_PAYLOAD + 1, 1, 0x04))


def test_out_of_range_fields_rejected():
    with pytest.raises(ValueError):
        P.encode_message(P.ClientHello(2**32))
    with pytest.raises(ValueError):
        P.encode_message(P.Heartbeat(-1, 0))


def test_encoding_is_deterministic(rng):
    for _ in range(200):
        m = random_message(rng)
        assert P.encode_message(m) == P.encode_message(m)


def test_concatenated_messages(rng):
    msgs = [random_message(rng) for _ in range(300)]
    buf = b"".join(P.encode_message(m) for m in msgs)
    out, pos = [], 0
    while pos < len(buf):
        m, used = P.decode_message(buf[pos:])
        out.append(m)
        pos += used
    assert out == msgs and pos == len(buf)


def test_frame_reader_byte_by_byte(rng):
    msgs = [random_message(rng) for _ in range(50)]
    buf = b"".join(P.encode_message(m) for m in msgs)
    reader, out = P.FrameReader(), []
    for i in range(len(buf)):
        out.extend(reader.feed(buf[i:i + 1]))
    assert out == msgs and reader.buffered == 0


def test_random_garbage_never_crashes():
    rng = random.Random(3)
    for _ in range(5000):
        buf = rng.randbytes(rng.randrange(40))
        try:
            P.decode_message(buf)
        except P.ProtocolError:
            pass
