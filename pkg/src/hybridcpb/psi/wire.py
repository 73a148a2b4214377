"""Length-prefixed message framing shared by the PSI and server-aided protocols.

Frame: 4-byte big-endian payload length, 1-byte message type, payload.
"""

from __future__ import annotations

import enum
import socket
import struct
from dataclasses import dataclass
from typing import Iterable, Iterator

_HEADER = struct.Struct(">IB")
MAX_PAYLOAD = 1 << 30


class MsgType(enum.IntEnum):
    HELLO = 1
    BLINDED_BATCH = 2
    RESPONSE_BATCH = 3
    RECORD_BATCH = 4
    ABORT = 5
    SUBMISSION = 6
    BUFFER_DELIVERY = 7


class ProtocolId(enum.IntEnum):
    PSI_CA = 1
    PSI_DT = 2


class AbortReason(enum.IntEnum):
    MALFORMED = 1
    WRONG_PHASE = 2
    BAD_ELEMENT = 3
    UNSUPPORTED = 4
    DECRYPT_FAILED = 5


class WireError(ValueError):
    pass


@dataclass(frozen=True)
class Message:
    type: MsgType
    payload: bytes

    def encode(self) -> bytes:
        return _HEADER.pack(len(self.payload), int(self.type)) + self.payload

    def __len__(self) -> int:
        return _HEADER.size + len(self.payload)


def decode_frames(data: bytes) -> list[Message]:
    out = []
    pos = 0
    while pos < len(data):
        if len(data) - pos < _HEADER.size:
            raise WireError("truncated frame header")
        length, tag = _HEADER.unpack_from(data, pos)
        pos += _HEADER.size
        if length > MAX_PAYLOAD or pos + length > len(data):
            raise WireError("truncated frame payload")
        try:
            mtype = MsgType(tag)
        except ValueError:
            raise WireError(f"unknown message type {tag}") from None
        out.append(Message(mtype, data[pos : pos + length]))
        pos += length
    return out


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise WireError("connection closed mid-frame")
        buf += chunk
    return bytes(buf)


def send_message(sock: socket.socket, msg: Message) -> int:
    data = msg.encode()
    sock.sendall(data)
    return len(data)


def recv_message(sock: socket.socket) -> Message:
    length, tag = _HEADER.unpack(_recv_exact(sock, _HEADER.size))
    if length > MAX_PAYLOAD:
        raise WireError("frame too large")
    try:
        mtype = MsgType(tag)
    except ValueError:
        raise WireError(f"unknown message type {tag}") from None
    return Message(mtype, _recv_exact(sock, length))


# -- payload codecs -----------------------------------------------------------

_HELLO = struct.Struct(">IBB")


def hello(set_size: int, protocol: ProtocolId, group_id: int) -> Message:
    return Message(MsgType.HELLO, _HELLO.pack(set_size, int(protocol), group_id))


def parse_hello(msg: Message) -> tuple[int, int, int]:
    if msg.type != MsgType.HELLO or len(msg.payload) != _HELLO.size:
        raise WireError("malformed HELLO")
    return _HELLO.unpack(msg.payload)


def abort(reason: AbortReason) -> Message:
    return Message(MsgType.ABORT, bytes([int(reason)]))


def element_batch(mtype: MsgType, elements: Iterable[bytes], element_len: int) -> Message:
    elems = list(elements)
    if any(len(e) != element_len for e in elems):
        raise WireError("element with non-canonical length")
    return Message(mtype, struct.pack(">I", len(elems)) + b"".join(elems))


def parse_element_batch(msg: Message, element_len: int) -> list[bytes]:
    if len(msg.payload) < 4:
        raise WireError("malformed batch")
    (count,) = struct.unpack_from(">I", msg.payload)
    body = msg.payload[4:]
    if len(body) != count * element_len:
        raise WireError("batch length does not match element count")
    return [body[i : i + element_len] for i in range(0, len(body), element_len)]


def record_batch(records: Iterable[tuple[bytes, bytes]], tag_len: int) -> Message:
    parts = []
    n = 0
    for tag, blob in records:
        if len(tag) != tag_len:
            raise WireError("tag with non-canonical length")
        parts.append(tag + struct.pack(">I", len(blob)) + blob)
        n += 1
    return Message(MsgType.RECORD_BATCH, struct.pack(">I", n) + b"".join(parts))


def parse_record_batch(msg: Message, tag_len: int) -> list[tuple[bytes, bytes]]:
    p = msg.payload
    if len(p) < 4:
        raise WireError("malformed record batch")
    (count,) = struct.unpack_from(">I", p)
    pos = 4
    out = []
    for _ in range(count):
        if pos + tag_len + 4 > len(p):
            raise WireError("truncated record")
        tag = p[pos : pos + tag_len]
        (blen,) = struct.unpack_from(">I", p, pos + tag_len)
        pos += tag_len + 4
        if pos + blen > len(p):
            raise WireError("truncated record body")
        out.append((tag, p[pos : pos + blen]))
        pos += blen
    if pos != len(p):
        raise WireError("trailing bytes in record batch")
    return out


def iter_lp(payload: bytes, pos: int) -> Iterator[tuple[bytes, int]]:
    """Yield (blob, next_pos) for length-prefixed blobs until the payload ends."""
    while pos < len(payload):
        if pos + 4 > len(payload):
            raise WireError("truncated length prefix")
        (n,) = struct.unpack_from(">I", payload, pos)
        pos += 4
        if pos + n > len(payload):
            raise WireError("truncated blob")
        yield payload[pos : pos + n], pos + n
        pos += n
