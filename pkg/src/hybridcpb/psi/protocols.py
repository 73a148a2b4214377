"""Semi-honest PSI-CA and PSI-DT as message-driven client/server sessions.

PSI-CA: the client sends H(c)^a; the server returns those raised to b in
shuffled order together with its own H(s)^b, also shuffled. The client
raises the latter to a and counts matches against the double-blinded
values. The shuffle hides which of its elements matched, so the client
learns |S ∩ C| only; the server learns |C|.

PSI-DT (OPRF variant): the client obtains H(c)^k for its elements through a
blinded evaluation; the server sends, for every s, a tag and the record
encrypted under a key derived from H(s)^k. Only intersecting records can be
matched and decrypted.
"""

from __future__ import annotations

import enum
import hashlib
import random
import socket
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from . import wire
from .groups import Ed25519Group, Group, GroupError, X25519Group
from .wire import AbortReason, Message, MsgType, ProtocolId, WireError

TAG_LEN = 32
_ZERO_NONCE = bytes(12)


class ProtocolAbort(RuntimeError):
    def __init__(self, reason: AbortReason, detail: str = "") -> None:
        super().__init__(f"{reason.name}: {detail}" if detail else reason.name)
        self.reason = reason


class Phase(enum.Enum):
    INIT = "init"
    WAIT_RESPONSE = "wait_response"
    WAIT_REQUEST = "wait_request"
    DONE = "done"
    ABORTED = "aborted"


def encode_element(x: int | bytes | str) -> bytes:
    if isinstance(x, bytes):
        return b"b" + x
    if isinstance(x, str):
        return b"s" + x.encode()
    if x < 0:
        raise ValueError("elements must be non-negative")
    return b"i" + x.to_bytes(max(8, (x.bit_length() + 7) // 8), "big")


def _tag(element: bytes) -> bytes:
    return hashlib.sha256(b"psi-tag|" + element).digest()


def _record_key(element: bytes) -> bytes:
    return hashlib.sha256(b"psi-key|" + element).digest()[:16]


@dataclass
class Transcript:
    bytes_sent: int = 0
    bytes_received: int = 0
    messages_sent: int = 0
    messages_received: int = 0
    elapsed: float = 0.0


class _Session:
    role = "?"
    protocol: ProtocolId
    default_group: type[Group] = Ed25519Group
    needs_inverse = False

    def __init__(self, items: Iterable[Any], group: Group | None = None, rng: random.Random | None = None) -> None:
        self.group = group or self.default_group()
        if self.needs_inverse and not self.group.invertible:
            raise ValueError(f"{type(self).__name__} needs a group with scalar inverses")
        self.rng = rng
        self.phase = Phase.INIT
        self.transcript = Transcript()
        self.result: Any = None
        self._set_items(items)

    def _set_items(self, items: Iterable[Any]) -> None:
        raise NotImplementedError

    def _shuffle(self, seq: list) -> None:
        (self.rng or random.SystemRandom()).shuffle(seq)

    def _sent(self, msgs: list[Message]) -> list[Message]:
        for m in msgs:
            self.transcript.bytes_sent += len(m)
            self.transcript.messages_sent += 1
        return msgs

    def start(self) -> list[Message]:
        return []

    def receive(self, msgs: list[Message]) -> list[Message]:
        """Consume a flight of messages; return the reply flight."""
        t0 = time.perf_counter()
        for m in msgs:
            self.transcript.bytes_received += len(m)
            self.transcript.messages_received += 1
        try:
            if any(m.type == MsgType.ABORT for m in msgs):
                code = msgs[-1].payload[0] if msgs[-1].payload else AbortReason.MALFORMED
                raise ProtocolAbort(AbortReason(code), "peer aborted")
            out = self._handle(msgs)
        except ProtocolAbort as exc:
            self.phase = Phase.ABORTED
            if any(m.type == MsgType.ABORT for m in msgs):
                raise
            reply = self._sent([wire.abort(exc.reason)])
            exc.reply = reply  # type: ignore[attr-defined]
            raise
        except (WireError, GroupError) as exc:
            self.phase = Phase.ABORTED
            reason = AbortReason.BAD_ELEMENT if isinstance(exc, GroupError) else AbortReason.MALFORMED
            err = ProtocolAbort(reason, str(exc))
            err.reply = self._sent([wire.abort(reason)])  # type: ignore[attr-defined]
            raise err from exc
        finally:
            self.transcript.elapsed += time.perf_counter() - t0
        return self._sent(out)

    def _handle(self, msgs: list[Message]) -> list[Message]:
        raise NotImplementedError

    def _expect(self, msgs: list[Message], *types: MsgType) -> None:
        if [m.type for m in msgs] != list(types):
            raise ProtocolAbort(AbortReason.WRONG_PHASE, f"expected {[t.name for t in types]}")

    def _check_hello(self, msg: Message) -> int:
        size, proto, gid = wire.parse_hello(msg)
        if proto != self.protocol or gid != self.group.group_id:
            raise ProtocolAbort(AbortReason.UNSUPPORTED, "protocol or group mismatch")
        return size


class _Client(_Session):
    role = "client"

    def _set_items(self, items: Iterable[Any]) -> None:
        self.items = sorted(set(items), key=encode_element)

    def start(self) -> list[Message]:
        if self.phase is not Phase.INIT:
            raise ProtocolAbort(AbortReason.WRONG_PHASE, "client already started")
        t0 = time.perf_counter()
        g = self.group
        self._r = g.random_scalar(self.rng)
        blinded = [g.exp(g.hash_to_group(encode_element(c)), self._r) for c in self.items]
        msgs = [
            wire.hello(len(self.items), self.protocol, g.group_id),
            wire.element_batch(MsgType.BLINDED_BATCH, blinded, g.element_len),
        ]
        self.phase = Phase.WAIT_RESPONSE
        self.transcript.elapsed += time.perf_counter() - t0
        return self._sent(msgs)

    def _unblinded(self, resp: Message) -> list[bytes]:
        g = self.group
        elems = wire.parse_element_batch(resp, g.element_len)
        if len(elems) != len(self.items):
            raise ProtocolAbort(AbortReason.MALFORMED, "response size mismatch")
        inv = g.inverse(self._r)
        return [g.exp(g.validate(e), inv) for e in elems]


class _Server(_Session):
    role = "server"

    def _request(self, msgs: list[Message]) -> list[bytes]:
        if self.phase is not Phase.INIT:
            raise ProtocolAbort(AbortReason.WRONG_PHASE, "server already answered")
        self._expect(msgs, MsgType.HELLO, MsgType.BLINDED_BATCH)
        self.peer_size = self._check_hello(msgs[0])
        g = self.group
        elems = wire.parse_element_batch(msgs[1], g.element_len)
        if len(elems) != self.peer_size:
            raise ProtocolAbort(AbortReason.MALFORMED, "batch size does not match HELLO")
        return [g.validate(e) for e in elems]


class PsiCaClient(_Client):
    protocol = ProtocolId.PSI_CA
    default_group = X25519Group

    def _handle(self, msgs: list[Message]) -> list[Message]:
        if self.phase is not Phase.WAIT_RESPONSE:
            raise ProtocolAbort(AbortReason.WRONG_PHASE, "client not waiting for a response")
        self._expect(msgs, MsgType.HELLO, MsgType.RESPONSE_BATCH, MsgType.BLINDED_BATCH)
        self.peer_size = self._check_hello(msgs[0])
        g = self.group
        doubled = wire.parse_element_batch(msgs[1], g.element_len)
        if len(doubled) != len(self.items):
            raise ProtocolAbort(AbortReason.MALFORMED, "response size mismatch")
        theirs = wire.parse_element_batch(msgs[2], g.element_len)
        if len(theirs) != self.peer_size:
            raise ProtocolAbort(AbortReason.MALFORMED, "server batch does not match HELLO")
        mine = {_tag(g.validate(e)) for e in doubled}
        self.result = sum(1 for e in theirs if _tag(g.exp(g.validate(e), self._r)) in mine)
        self.phase = Phase.DONE
        return []


class PsiCaServer(_Server):
    protocol = ProtocolId.PSI_CA
    default_group = X25519Group

    def _set_items(self, items: Iterable[Any]) -> None:
        self.items = sorted(set(items), key=encode_element)

    def _handle(self, msgs: list[Message]) -> list[Message]:
        elems = self._request(msgs)
        g = self.group
        b = g.random_scalar(self.rng)
        answered = [g.exp(e, b) for e in elems]
        self._shuffle(answered)
        own = [g.exp(g.hash_to_group(encode_element(s)), b) for s in self.items]
        self._shuffle(own)
        self.phase = Phase.DONE
        return [
            wire.hello(len(self.items), self.protocol, g.group_id),
            wire.element_batch(MsgType.RESPONSE_BATCH, answered, g.element_len),
            wire.element_batch(MsgType.BLINDED_BATCH, own, g.element_len),
        ]


class PsiDtClient(_Client):
    protocol = ProtocolId.PSI_DT
    needs_inverse = True

    def _handle(self, msgs: list[Message]) -> list[Message]:
        if self.phase is not Phase.WAIT_RESPONSE:
            raise ProtocolAbort(AbortReason.WRONG_PHASE, "client not waiting for a response")
        self._expect(msgs, MsgType.HELLO, MsgType.RESPONSE_BATCH, MsgType.RECORD_BATCH)
        self.peer_size = self._check_hello(msgs[0])
        prf = self._unblinded(msgs[1])
        by_tag = {_tag(v): (c, v) for c, v in zip(self.items, prf)}
        records = wire.parse_record_batch(msgs[2], TAG_LEN)
        if len(records) != self.peer_size:
            raise ProtocolAbort(AbortReason.MALFORMED, "record count does not match HELLO")
        out = {}
        for tag, blob in records:
            hit = by_tag.get(tag)
            if hit is None:
                continue
            c, v = hit
            try:
                out[c] = AESGCM(_record_key(v)).decrypt(_ZERO_NONCE, blob, tag)
            except InvalidTag:
                raise ProtocolAbort(AbortReason.DECRYPT_FAILED, "record failed authentication") from None
        self.result = out
        self.phase = Phase.DONE
        return []


class PsiDtServer(_Server):
    protocol = ProtocolId.PSI_DT
    needs_inverse = True

    def _set_items(self, items: Iterable[Any]) -> None:
        records = dict(items.items() if isinstance(items, Mapping) else items)
        for v in records.values():
            if not isinstance(v, (bytes, bytearray)):
                raise TypeError("PSI-DT records must be bytes")
        self.records = {k: bytes(records[k]) for k in sorted(records, key=encode_element)}
        self.items = list(self.records)

    def _handle(self, msgs: list[Message]) -> list[Message]:
        elems = self._request(msgs)
        g = self.group
        if not hasattr(self, "_k"):
            self._k = g.random_scalar(self.rng)
        evaluated = [g.exp(e, self._k) for e in elems]
        recs = []
        for s, data in self.records.items():
            v = g.exp(g.hash_to_group(encode_element(s)), self._k)
            tag = _tag(v)
            recs.append((tag, AESGCM(_record_key(v)).encrypt(_ZERO_NONCE, data, tag)))
        self._shuffle(recs)
        self.phase = Phase.DONE
        return [
            wire.hello(len(self.items), self.protocol, g.group_id),
            wire.element_batch(MsgType.RESPONSE_BATCH, evaluated, g.element_len),
            wire.record_batch(recs, TAG_LEN),
        ]


@dataclass
class PsiOutcome:
    result: Any
    client: Transcript
    server: Transcript
    messages: list[bytes] = field(default_factory=list, repr=False)

    @property
    def total_bytes(self) -> int:
        return self.client.bytes_sent + self.server.bytes_sent


def run_in_process(client: _Client, server: _Server) -> PsiOutcome:
    """Drive one round trip, handing each flight to the peer as raw frames."""
    log: list[bytes] = []

    def deliver(session: _Session, flight: list[Message]) -> list[Message]:
        raw = b"".join(m.encode() for m in flight)
        log.append(raw)
        return session.receive(wire.decode_frames(raw))

    deliver(client, deliver(server, client.start()))
    return PsiOutcome(client.result, client.transcript, server.transcript, log)


def _serve(session: _Session, sock: socket.socket, n_messages: int) -> list[Message]:
    msgs = [wire.recv_message(sock) for _ in range(n_messages)]
    try:
        reply = session.receive(msgs)
    except ProtocolAbort as exc:
        for m in getattr(exc, "reply", []):
            wire.send_message(sock, m)
        raise
    for m in reply:
        wire.send_message(sock, m)
    return reply


def run_over_socket(client: _Client, server: _Server) -> PsiOutcome:
    """Run one session over a connected local socket pair, server in a thread."""
    a, b = socket.socketpair()
    errors: list[BaseException] = []

    def server_main() -> None:
        try:
            _serve(server, b, 2)
        except BaseException as exc:  # reported to the caller below
            errors.append(exc)

    th = threading.Thread(target=server_main, daemon=True)
    th.start()
    try:
        for m in client.start():
            wire.send_message(a, m)
        first = wire.recv_message(a)
        if first.type == MsgType.ABORT:
            client.receive([first])
        rest = [wire.recv_message(a) for _ in range(2)]
        client.receive([first, *rest])
    finally:
        th.join(timeout=60)
        a.close()
        b.close()
    if errors:
        raise errors[0]
    return PsiOutcome(client.result, client.transcript, server.transcript)


def psi_ca(
    client_set: Iterable[Any],
    server_set: Iterable[Any],
    *,
    group: Group | None = None,
    rng: random.Random | None = None,
    transport: str = "memory",
) -> PsiOutcome:
    """Client learns |client_set ∩ server_set|."""
    group = group or X25519Group()
    client, server = PsiCaClient(client_set, group, rng), PsiCaServer(server_set, group, rng)
    return _run(client, server, transport)


def psi_dt(
    client_set: Iterable[Any],
    server_records: Mapping[Any, bytes],
    *,
    group: Group | None = None,
    rng: random.Random | None = None,
    transport: str = "memory",
) -> PsiOutcome:
    """Client learns {s: record} for every s it holds."""
    group = group or Ed25519Group()
    client, server = PsiDtClient(client_set, group, rng), PsiDtServer(server_records, group, rng)
    return _run(client, server, transport)


def _run(client: _Client, server: _Server, transport: str) -> PsiOutcome:
    if transport == "memory":
        return run_in_process(client, server)
    if transport == "socket":
        return run_over_socket(client, server)
    raise ValueError(f"unknown transport {transport!r}")


@dataclass
class MutualOutcome:
    a_result: Any
    b_result: Any
    runs: tuple[PsiOutcome, PsiOutcome]

    @property
    def total_bytes(self) -> int:
        return sum(r.total_bytes for r in self.runs)


def mutual_psi_ca(a_set, b_set, **kw) -> MutualOutcome:
    """Two PSI-CA runs with inverted roles; both parties learn the cardinality."""
    first = psi_ca(a_set, b_set, **kw)
    second = psi_ca(b_set, a_set, **kw)
    return MutualOutcome(first.result, second.result, (first, second))


def mutual_psi_dt(a_records: Mapping[Any, bytes], b_records: Mapping[Any, bytes], **kw) -> MutualOutcome:
    """Two PSI-DT runs with inverted roles; each side gets the other's intersecting records."""
    first = psi_dt(a_records.keys(), b_records, **kw)
    second = psi_dt(b_records.keys(), a_records, **kw)
    return MutualOutcome(first.result, second.result, (first, second))
