"""Binary framing for server/client messages.

Frame layout: ``[length u32 BE][version u8][tag u8][payload]`` where
``length`` counts payload bytes only. All integers are big-endian.
Task and result payloads are opaque blobs at this layer.
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from typing import Union

VERSION = 1
HEADER = struct.Struct(">IBB")
HEADER_SIZE = HEADER.size
MAX_PAYLOAD = 16 * 1024 * 1024

U32_MAX = 2**32 - 1
U64_MAX = 2**64 - 1

_U8 = struct.Struct(">B")
_U32 = struct.Struct(">I")
_U64 = struct.Struct(">Q")
_U64U32 = struct.Struct(">QI")
_U64U64 = struct.Struct(">QQ")
_HELLO_ACK = struct.Struct(">QQI")


class ProtocolError(Exception):
    """Base class for decode/encode failures."""


class Incomplete(ProtocolError):
    """More bytes are needed before a frame can be decoded."""


class BadVersion(ProtocolError):
    pass


class UnknownTag(ProtocolError):
    pass


class MalformedPayload(ProtocolError):
    pass


class OversizePayload(ProtocolError):
    pass


class ShutdownReason(enum.IntEnum):
    SERVER_STOPPING = 0
    REJECTED = 1


@dataclass(frozen=True)
class ClientHello:
    requested_slots: int


@dataclass(frozen=True)
class HelloAck:
    client_id: int
    lease_ms: int
    chunk_max: int


@dataclass(frozen=True)
class ChunkRequest:
    client_id: int
    max_tasks: int


@dataclass(frozen=True)
class TaskChunkMsg:
    chunk_id: int
    tasks: tuple[bytes, ...]


@dataclass(frozen=True)
class Drained:
    pass


@dataclass(frozen=True)
class ResultChunkMsg:
    chunk_id: int
    results: tuple[bytes, ...]


@dataclass(frozen=True)
class ResultAck:
    chunk_id: int


@dataclass(frozen=True)
class Heartbeat:
    client_id: int
    seq: int


@dataclass(frozen=True)
class HeartbeatAck:
    seq: int


@dataclass(frozen=True)
class ShutdownNotice:
    reason: ShutdownReason


Message = Union[
    ClientHello, HelloAck, ChunkRequest, TaskChunkMsg, Drained,
    ResultChunkMsg, ResultAck, Heartbeat, HeartbeatAck, ShutdownNotice,
]

TAG_CLIENT_HELLO = 0x01
TAG_HELLO_ACK = 0x02
TAG_CHUNK_REQUEST = 0x03
TAG_TASK_CHUNK = 0x04
TAG_DRAINED = 0x05
TAG_RESULT_CHUNK = 0x06
TAG_RESULT_ACK = 0x07
TAG_HEARTBEAT = 0x08
TAG_HEARTBEAT_ACK = 0x09
TAG_SHUTDOWN = 0x0A


def _check(value: int, limit: int, name: str) -> int:
    if not isinstance(value, int) or value < 0 or value > limit:
        raise ValueError(f"{name}={value!r} out of range")
    return value


def _pack_blobs(head: bytes, blobs: tuple[bytes, ...]) -> bytes:
    _check(len(blobs), U32_MAX, "blob count")
    parts = [head, _U32.pack(len(blobs))]
    for blob in blobs:
        parts.append(_U32.pack(len(blob)))
        parts.append(bytes(blob))
    return b"".join(parts)


def _unpack_blobs(payload, offset: int) -> tuple[bytes, ...]:
    end = len(payload)
    if end - offset < 4:
        raise MalformedPayload("missing blob count")
    (count,) = _U32.unpack_from(payload, offset)
    offset += 4
    blobs = []
    for _ in range(count):
        if end - offset < 4:
            raise MalformedPayload("truncated blob length")
        (n,) = _U32.unpack_from(payload, offset)
        offset += 4
        if end - offset < n:
            raise MalformedPayload("truncated blob")
        blobs.append(bytes(payload[offset:offset + n]))
        offset += n
    if offset != end:
        raise MalformedPayload("trailing bytes in payload")
    return tuple(blobs)


def _payload(msg: Message) -> tuple[int, bytes]:
    if isinstance(msg, Heartbeat):
        return TAG_HEARTBEAT, _U64U64.pack(_check(msg.client_id, U64_MAX, "client_id"),
                                           _check(msg.seq, U64_MAX, "seq"))
    if isinstance(msg, HeartbeatAck):
        return TAG_HEARTBEAT_ACK, _U64.pack(_check(msg.seq, U64_MAX, "seq"))
    if isinstance(msg, ChunkRequest):
        return TAG_CHUNK_REQUEST, _U64U32.pack(_check(msg.client_id, U64_MAX, "client_id"),
                                               _check(msg.max_tasks, U32_MAX, "max_tasks"))
    if isinstance(msg, TaskChunkMsg):
        head = _U64.pack(_check(msg.chunk_id, U64_MAX, "chunk_id"))
        return TAG_TASK_CHUNK, _pack_blobs(head, msg.tasks)
    if isinstance(msg, ResultChunkMsg):
        head = _U64.pack(_check(msg.chunk_id, U64_MAX, "chunk_id"))
        return TAG_RESULT_CHUNK, _pack_blobs(head, msg.results)
    if isinstance(msg, ResultAck):
        return TAG_RESULT_ACK, _U64.pack(_check(msg.chunk_id, U64_MAX, "chunk_id"))
    if isinstance(msg, ClientHello):
        return TAG_CLIENT_HELLO, _U32.pack(_check(msg.requested_slots, U32_MAX, "requested_slots"))
    if isinstance(msg, HelloAck):
        return TAG_HELLO_ACK, _HELLO_ACK.pack(
            _check(msg.client_id, U64_MAX, "client_id"),
            _check(msg.lease_ms, U64_MAX, "lease_ms"),
            _check(msg.chunk_max, U32_MAX, "chunk_max"),
        )
    if isinstance(msg, Drained):
        return TAG_DRAINED, b""
    if isinstance(msg, ShutdownNotice):
        return TAG_SHUTDOWN, _U8.pack(ShutdownReason(msg.reason))
    raise TypeError(f"not a protocol message: {msg!r}")


def encode_message(msg: Message) -> bytes:
    """Encode one message as a complete frame."""
    tag, payload = _payload(msg)
    if len(payload) > MAX_PAYLOAD:
        raise OversizePayload(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")
    return HEADER.pack(len(payload), VERSION, tag) + payload


def _fixed(payload, st: struct.Struct) -> tuple:
    if len(payload) != st.size:
        raise MalformedPayload(f"expected {st.size} payload bytes, got {len(payload)}")
    return st.unpack(payload)


def _parse(tag: int, payload) -> Message:
    if tag == TAG_HEARTBEAT:
        return Heartbeat(*_fixed(payload, _U64U64))
    if tag == TAG_HEARTBEAT_ACK:
        return HeartbeatAck(*_fixed(payload, _U64))
    if tag == TAG_CHUNK_REQUEST:
        return ChunkRequest(*_fixed(payload, _U64U32))
    if tag in (TAG_TASK_CHUNK, TAG_RESULT_CHUNK):
        if len(payload) < 8:
            raise MalformedPayload("missing chunk_id")
        (chunk_id,) = _U64.unpack_from(payload, 0)
        blobs = _unpack_blobs(payload, 8)
        return TaskChunkMsg(chunk_id, blobs) if tag == TAG_TASK_CHUNK else ResultChunkMsg(chunk_id, blobs)
    if tag == TAG_RESULT_ACK:
        return ResultAck(*_fixed(payload, _U64))
    if tag == TAG_CLIENT_HELLO:
        return ClientHello(*_fixed(payload, _U32))
    if tag == TAG_HELLO_ACK:
        return HelloAck(*_fixed(payload, _HELLO_ACK))
    if tag == TAG_DRAINED:
        if len(payload):
            raise MalformedPayload("Drained carries no payload")
        return Drained()
    if tag == TAG_SHUTDOWN:
        (code,) = _fixed(payload, _U8)
        try:
            return ShutdownNotice(ShutdownReason(code))
        except ValueError:
            raise MalformedPayload(f"unknown shutdown reason {code}") from None
    raise UnknownTag(f"unknown tag 0x{tag:02X}")


_KNOWN_TAGS = frozenset(range(TAG_CLIENT_HELLO, TAG_SHUTDOWN + 1))


def decode_message(buf) -> tuple[Message, int]:
    """Decode the first frame in ``buf``.

    Returns ``(message, consumed)``; trailing bytes are left alone.
    Raises :class:`Incomplete` when ``buf`` holds only part of a frame.
    """
    if len(buf) < HEADER_SIZE:
        raise Incomplete(HEADER_SIZE - len(buf))
    length, version, tag = HEADER.unpack_from(buf, 0)
    if version != VERSION:
        raise BadVersion(f"version {version}, expected {VERSION}")
    if tag not in _KNOWN_TAGS:
        raise UnknownTag(f"unknown tag 0x{tag:02X}")
    if length > MAX_PAYLOAD:
        raise OversizePayload(f"declared length {length} exceeds {MAX_PAYLOAD}")
    end = HEADER_SIZE + length
    if len(buf) < end:
        raise Incomplete(end - len(buf))
    return _parse(tag, memoryview(buf)[HEADER_SIZE:end]), end


class FrameReader:
    """Accumulates stream bytes and yields complete messages in order."""

    def __init__(self) -> None:
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[Message]:
        self._buf += data
        out = []
        while True:
            try:
                msg, used = decode_message(self._buf)
            except Incomplete:
                break
            out.append(msg)
            del self._buf[:used]
        return out

    @property
    def buffered(self) -> int:
        return len(self._buf)


def read_message(sock, reader: FrameReader, pending: list) -> Message | None:
    """Block until one message is available on ``sock``; None on EOF."""
    while not pending:
        data = sock.recv(65536)
        if not data:
            return None
        pending.extend(reader.feed(data))
    return pending.pop(0)
