"""Server-aided O2O computation and log sharing with PRP labels.

Every org labels each occurrence of a source with PRP_k(source || counter),
where the counter numbers repeated occurrences, and encrypts the
(source, day) record under a key derived from the same pair. The STA only
matches labels: equal labels mean a common occurrence, which gives both the
O2O count and the ciphertexts to forward inside a cluster. A recipient can
decrypt a forwarded record exactly because it holds the same pair.
"""

from __future__ import annotations

import hashlib
import secrets
import struct
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .coordination import O2OMatrix
from .corpus import OrgLog
from .psi.wire import Message, MsgType, WireError, decode_frames

LABEL_LEN = 16
_ZERO_NONCE = bytes(12)
_MAX_COUNTER = 2**32 - 1
_RECORD = struct.Struct(">I i")  # source (24-bit, stored in 32), day


class ServerAidedError(RuntimeError):
    pass


def _random_bytes(rng, n: int) -> bytes:
    if rng is None:
        return secrets.token_bytes(n)
    if hasattr(rng, "bytes"):  # numpy Generator
        return rng.bytes(n)
    return rng.randbytes(n)


@dataclass(frozen=True)
class PrpKey:
    """Shared 128-bit key held by every organization, never by the STA."""

    key: bytes

    def __post_init__(self) -> None:
        if len(self.key) != 16:
            raise ValueError("PRP key must be 16 bytes")

    @classmethod
    def generate(cls, rng=None) -> "PrpKey":
        return cls(_random_bytes(rng, 16))

    def __repr__(self) -> str:
        return "PrpKey(<redacted>)"


def encode_occurrence(source: int, counter: int) -> bytes:
    """24-bit source, 32-bit counter, zero-padded to one AES block."""
    if not 0 <= source < 1 << 24:
        raise ValueError("source outside the /24 space")
    if not 1 <= counter <= _MAX_COUNTER:
        raise ServerAidedError(f"counter {counter} out of range")
    return source.to_bytes(3, "big") + counter.to_bytes(4, "big") + bytes(9)


def prp(key: PrpKey, blocks: Sequence[bytes]) -> list[bytes]:
    """AES-128 on each 16-byte block."""
    if not blocks:
        return []
    enc = Cipher(algorithms.AES(key.key), modes.ECB()).encryptor()
    out = enc.update(b"".join(blocks)) + enc.finalize()
    return [out[i : i + LABEL_LEN] for i in range(0, len(out), LABEL_LEN)]


def record_key(key: PrpKey, block: bytes) -> bytes:
    return hashlib.sha256(b"record-key|" + key.key + block).digest()[:16]


@dataclass(frozen=True)
class LabeledSet:
    """What an org submits: labels and aligned ciphertexts, in label order."""

    org: str
    labels: tuple[bytes, ...]
    ciphertexts: tuple[bytes, ...]

    def __post_init__(self) -> None:
        if len(self.labels) != len(self.ciphertexts):
            raise ValueError("labels and ciphertexts must align")

    def __len__(self) -> int:
        return len(self.labels)

    def to_message(self) -> Message:
        org = self.org.encode()
        parts = [struct.pack(">H", len(org)), org, struct.pack(">I", len(self))]
        for lab, ct in zip(self.labels, self.ciphertexts):
            parts.append(lab + struct.pack(">I", len(ct)) + ct)
        return Message(MsgType.SUBMISSION, b"".join(parts))

    @classmethod
    def from_message(cls, msg: Message) -> "LabeledSet":
        if msg.type != MsgType.SUBMISSION:
            raise WireError("not a submission")
        org, count, pos = _read_header(msg.payload)
        labels, cts = [], []
        p = msg.payload
        for _ in range(count):
            if pos + LABEL_LEN + 4 > len(p):
                raise WireError("truncated submission")
            labels.append(p[pos : pos + LABEL_LEN])
            (n,) = struct.unpack_from(">I", p, pos + LABEL_LEN)
            pos += LABEL_LEN + 4
            cts.append(p[pos : pos + n])
            pos += n
        if pos != len(p):
            raise WireError("trailing bytes in submission")
        return cls(org, tuple(labels), tuple(cts))


def _read_header(p: bytes) -> tuple[str, int, int]:
    if len(p) < 6:
        raise WireError("truncated header")
    (n,) = struct.unpack_from(">H", p)
    org = p[2 : 2 + n].decode()
    (count,) = struct.unpack_from(">I", p, 2 + n)
    return org, count, 6 + n


@dataclass(frozen=True)
class RecordKeyStore:
    """Org-local: label position -> (source, counter), keys derived on demand."""

    org: str
    entries: tuple[tuple[int, int], ...]
    key: PrpKey = field(repr=False)

    def record_key(self, position: int) -> bytes:
        source, counter = self.entries[position]
        return record_key(self.key, encode_occurrence(source, counter))

    @property
    def keys(self) -> dict[tuple[int, int], bytes]:
        return {e: record_key(self.key, encode_occurrence(*e)) for e in self.entries}


def number_occurrences(log: OrgLog) -> list[tuple[int, int, int]]:
    """(source, counter, day) per event, counting in (day, insertion) order."""
    seen: dict[int, int] = defaultdict(int)
    out = []
    for day, src in zip(log.days.tolist(), log.sources.tolist()):
        seen[src] += 1
        if seen[src] > _MAX_COUNTER:
            raise ServerAidedError(f"source {src} repeats more than 2^32 times")
        out.append((src, seen[src], day))
    return out


def encrypt_with_keys(log: OrgLog, key: PrpKey) -> tuple[LabeledSet, RecordKeyStore]:
    """Labels and ciphertexts for the STA, plus the org-local key store."""
    occ = number_occurrences(log)
    blocks = [encode_occurrence(s, c) for s, c, _ in occ]
    labels = prp(key, blocks)
    order = sorted(range(len(labels)), key=labels.__getitem__)
    out_labels, out_cts, entries = [], [], []
    for i in order:
        s, c, day = occ[i]
        ct = AESGCM(record_key(key, blocks[i])).encrypt(_ZERO_NONCE, _RECORD.pack(s, day), labels[i])
        out_labels.append(labels[i])
        out_cts.append(ct)
        entries.append((s, c))
    return LabeledSet(log.org, tuple(out_labels), tuple(out_cts)), RecordKeyStore(log.org, tuple(entries), key)


def encrypt_dataset(log: OrgLog, key: PrpKey) -> LabeledSet:
    return encrypt_with_keys(log, key)[0]


@dataclass(frozen=True, eq=False)
class StaBuffer:
    """STA state after matching: O2O counts and per-pair forwarding buffers.

    ``buff[(i, j)]`` lists (position in S_i, ciphertext from O_j) for every
    label the two orgs share.
    """

    o2o: O2OMatrix
    buff: Mapping[tuple[str, str], tuple[tuple[int, bytes], ...]]

    def deliveries(self, cluster: Iterable[str], recipient: str) -> dict[str, tuple[tuple[int, bytes], ...]]:
        members = set(cluster)
        if recipient not in members:
            raise ServerAidedError(f"{recipient} is not in the cluster")
        return {j: self.buff.get((recipient, j), ()) for j in sorted(members - {recipient})}


def sta_o2o(submissions: Sequence[LabeledSet]) -> StaBuffer:
    """Match labels across all submissions in one pass over a hash index."""
    orgs = [s.org for s in submissions]
    if len(set(orgs)) != len(orgs):
        raise ServerAidedError("duplicate submission from one organization")
    n = len(orgs)
    index: dict[bytes, list[tuple[int, int]]] = defaultdict(list)
    for oi, sub in enumerate(submissions):
        for pos, lab in enumerate(sub.labels):
            index[lab].append((oi, pos))
    counts = np.zeros((n, n), dtype=np.int64)
    for oi, sub in enumerate(submissions):
        counts[oi, oi] = len(sub)
    buff: dict[tuple[str, str], list[tuple[int, bytes]]] = defaultdict(list)
    for holders in index.values():
        if len(holders) < 2:
            continue
        for a, pa in holders:
            for b, pb in holders:
                if a == b:
                    continue
                counts[a, b] += 1
                buff[(orgs[a], orgs[b])].append((pa, submissions[b].ciphertexts[pb]))
    frozen = {k: tuple(sorted(v)) for k, v in buff.items()}
    return StaBuffer(O2OMatrix(tuple(orgs), counts), frozen)


def delivery_message(peer: str, entries: Sequence[tuple[int, bytes]]) -> Message:
    org = peer.encode()
    parts = [struct.pack(">H", len(org)), org, struct.pack(">I", len(entries))]
    for pos, ct in entries:
        parts.append(struct.pack(">II", pos, len(ct)) + ct)
    return Message(MsgType.BUFFER_DELIVERY, b"".join(parts))


def parse_delivery(msg: Message) -> tuple[str, list[tuple[int, bytes]]]:
    if msg.type != MsgType.BUFFER_DELIVERY:
        raise WireError("not a buffer delivery")
    peer, count, pos = _read_header(msg.payload)
    p = msg.payload
    out = []
    for _ in range(count):
        if pos + 8 > len(p):
            raise WireError("truncated delivery")
        idx, n = struct.unpack_from(">II", p, pos)
        pos += 8
        out.append((idx, p[pos : pos + n]))
        pos += n
    if pos != len(p):
        raise WireError("trailing bytes in delivery")
    return peer, out


def log_sharing(
    deliveries: Mapping[str, Sequence[tuple[int, bytes]]],
    own: LabeledSet,
    keystore: RecordKeyStore,
) -> dict[str, OrgLog]:
    """Decrypt forwarded records; returns the recovered events per peer."""
    out = {}
    ciphers: dict[int, AESGCM] = {}  # one label often receives records from several peers
    for peer, entries in deliveries.items():
        days, sources = [], []
        for pos, ct in entries:
            if not 0 <= pos < len(keystore.entries):
                raise ServerAidedError(f"record from {peer} for a label {own.org} does not hold")
            cipher = ciphers.get(pos)
            if cipher is None:
                cipher = ciphers[pos] = AESGCM(keystore.record_key(pos))
            try:
                plain = cipher.decrypt(_ZERO_NONCE, ct, own.labels[pos])
            except InvalidTag:
                raise ServerAidedError(f"record from {peer} failed authentication (misrouted?)") from None
            src, day = _RECORD.unpack(plain)
            if src != keystore.entries[pos][0]:
                raise ServerAidedError("decrypted source does not match the label")
            sources.append(src)
            days.append(day)
        if sources:
            out[peer] = OrgLog(peer, np.array(days, dtype=np.int64), np.array(sources, dtype=np.int64))
    return out


def share_cluster(
    buffer: StaBuffer,
    cluster: Iterable[str],
    submissions: Mapping[str, LabeledSet],
    keystores: Mapping[str, RecordKeyStore],
) -> dict[str, dict[str, OrgLog]]:
    """Forward buffers inside one cluster and let every member decrypt."""
    members = sorted(set(cluster))
    return {
        org: log_sharing(buffer.deliveries(members, org), submissions[org], keystores[org]) for org in members
    }


def submission_bytes(sub: LabeledSet) -> int:
    return len(sub.to_message())


def roundtrip_submission(sub: LabeledSet) -> LabeledSet:
    (msg,) = decode_frames(sub.to_message().encode())
    return LabeledSet.from_message(msg)
