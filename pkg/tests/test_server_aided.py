from __future__ import annotations

import struct

import numpy as np
import pytest
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from hybridcpb.coordination import build_o2o
from hybridcpb.psi.wire import Message, MsgType, WireError, decode_frames
from hybridcpb.server_aided import (
    LabeledSet,
    PrpKey,
    ServerAidedError,
    StaBuffer,
    delivery_message,
    encode_occurrence,
    encrypt_dataset,
    encrypt_with_keys,
    log_sharing,
    number_occurrences,
    parse_delivery,
    prp,
    record_key,
    roundtrip_submission,
    share_cluster,
    sta_o2o,
)
from hybridcpb.sharing import share_intersection

from .conftest import as_pairs, make_log, random_logs

KEY = PrpKey(bytes(range(16)))


def _aes_block(key, block):
    enc = Cipher(algorithms.AES(key), modes.ECB()).encryptor()
    return enc.update(block) + enc.finalize()


def _setup(logs, key=KEY):
    subs, stores = {}, {}
    for org, log in logs.items():
        subs[org], stores[org] = encrypt_with_keys(log, key)
    return subs, stores


def test_block_encoding():
    assert encode_occurrence(0xABCDEF, 2) == bytes.fromhex("abcdef00000002") + bytes(9)
    for bad in (0, 2**32):
        with pytest.raises(ServerAidedError):
            encode_occurrence(1, bad)


def test_labels_are_aes_of_occurrence_blocks():
    log = make_log("a", [(0, 7), (1, 7), (2, 9)])
    sub = encrypt_dataset(log, KEY)
    expect = sorted(_aes_block(KEY.key, encode_occurrence(s, c)) for s, c in [(7, 1), (7, 2), (9, 1)])
    assert list(sub.labels) == expect
    assert len(set(sub.labels)) == 3
    assert prp(KEY, [encode_occurrence(7, 1)]) == [_aes_block(KEY.key, encode_occurrence(7, 1))]


def test_counters_follow_day_then_insertion_order():
    log = make_log("a", [(3, 5), (1, 5), (1, 6), (2, 5)])
    assert [(s, c, d) for s, c, d in number_occurrences(log)] == [(5, 1, 1), (6, 1, 1), (5, 2, 2), (5, 3, 3)]


def test_empty_log_gives_empty_submission():
    sub = encrypt_dataset(make_log("a", []), KEY)
    assert len(sub) == 0 and sub.labels == ()
    assert roundtrip_submission(sub) == sub


def test_same_occurrence_same_label_but_separate_ciphertexts():
    a = encrypt_dataset(make_log("a", [(0, 42)]), KEY)
    b = encrypt_dataset(make_log("b", [(3, 42)]), KEY)
    assert a.labels == b.labels
    assert a.ciphertexts != b.ciphertexts  # different day payloads
    other = encrypt_dataset(make_log("a", [(0, 42)]), PrpKey(bytes(16)))
    assert other.labels != a.labels


def test_record_key_depends_on_secret():
    block = encode_occurrence(1, 1)
    assert record_key(KEY, block) != record_key(PrpKey(bytes(16)), block)
    assert len(record_key(KEY, block)) == 16


def test_prp_key_validation_and_redaction():
    with pytest.raises(ValueError):
        PrpKey(b"short")
    k = PrpKey.generate(np.random.default_rng(0))
    assert len(k.key) == 16 and k.key.hex() not in repr(k)
    assert PrpKey.generate(np.random.default_rng(0)) == k


def test_multiset_example_o2o():
    logs = {"i": make_log("i", [(0, 1), (1, 1), (2, 2)]), "j": make_log("j", [(0, 1), (1, 2), (2, 2)])}
    buf = sta_o2o([encrypt_dataset(logs[o], KEY) for o in ("i", "j")])
    assert buf.o2o["i", "j"] == 2 == buf.o2o["j", "i"]
    assert buf.o2o["i", "i"] == 3
    assert len(buf.buff[("i", "j")]) == 2


def test_identical_and_disjoint_logs():
    same = [(d, s) for d, s in zip(range(5), [4, 4, 5, 6, 7])]
    buf = sta_o2o([encrypt_dataset(make_log(o, same), KEY) for o in "ab"])
    assert buf.o2o["a", "b"] == 5
    disjoint = [encrypt_dataset(make_log(o, [(0, 100 + k)]), KEY) for k, o in enumerate("abcd")]
    buf = sta_o2o(disjoint)
    assert (buf.o2o.counts == np.eye(4, dtype=int)).all()
    assert dict(buf.buff) == {}


def test_duplicate_submission_rejected():
    sub = encrypt_dataset(make_log("a", [(0, 1)]), KEY)
    with pytest.raises(ServerAidedError):
        sta_o2o([sub, sub])


def test_o2o_equals_multiset_plaintext_on_random_logs():
    rng = np.random.default_rng(12)
    for _ in range(5):
        logs = random_logs(rng, 5, 60, universe=20)
        orgs = sorted(logs)
        buf = sta_o2o([encrypt_dataset(logs[o], KEY) for o in orgs])
        assert np.array_equal(buf.o2o.counts, build_o2o(orgs, logs, multiset=True).counts)
        for (i, j), entries in buf.buff.items():
            assert len(entries) == buf.o2o[i, j]


def test_three_org_shared_source():
    logs = {
        "a": make_log("a", [(0, 9), (1, 1)]),
        "b": make_log("b", [(2, 9), (1, 2)]),
        "c": make_log("c", [(3, 9), (1, 3)]),
    }
    subs, stores = _setup(logs)
    buf = sta_o2o(list(subs.values()))
    got = share_cluster(buf, logs, subs, stores)
    assert as_pairs(got["a"]["b"]) == [(2, 9)] and as_pairs(got["a"]["c"]) == [(3, 9)]
    assert as_pairs(got["c"]["a"]) == [(0, 9)]


def test_singleton_cluster_recovers_nothing():
    logs = {"a": make_log("a", [(0, 9)]), "b": make_log("b", [(1, 9)])}
    subs, stores = _setup(logs)
    buf = sta_o2o(list(subs.values()))
    assert share_cluster(buf, ["a"], subs, stores) == {"a": {}}
    with pytest.raises(ServerAidedError):
        buf.deliveries(["b"], "a")


def test_end_to_end_matches_plaintext_intersection():
    rng = np.random.default_rng(21)
    for _ in range(10):
        logs = random_logs(rng, 4, 40, universe=15)
        subs, stores = _setup(logs, PrpKey.generate(rng))
        buf = sta_o2o([subs[o] for o in sorted(logs)])
        got = share_cluster(buf, logs, subs, stores)
        oracle = share_intersection(logs, multiset=True)
        for org in logs:
            assert set(got[org]) == set(oracle[org])
            for peer in oracle[org]:
                assert as_pairs(got[org][peer]) == as_pairs(oracle[org][peer])


def _looks_like_plaintext(blob: bytes) -> bool:
    """Can this field be read as (24-bit source, small day) without the key?"""
    if len(blob) != 8:
        return False
    src, day = struct.unpack(">I i", blob)
    return src < 2**24 and 0 <= day < 10_000


def test_sta_state_is_opaque():
    logs = random_logs(np.random.default_rng(3), 3, 40, universe=10)
    buf: StaBuffer = sta_o2o([encrypt_dataset(logs[o], KEY) for o in sorted(logs)])
    raw_blocks = {encode_occurrence(s, c) for log in logs.values() for s, c, _ in number_occurrences(log)}
    for entries in buf.buff.values():
        for pos, ct in entries:
            assert len(ct) == 8 + 16  # payload plus tag
            assert not _looks_like_plaintext(ct[:8])
            assert ct[:16] not in raw_blocks
    for sub in (encrypt_dataset(logs[o], KEY) for o in logs):
        assert not raw_blocks & set(sub.labels)


def test_submission_and_delivery_wire_roundtrip():
    log = make_log("org-7", [(0, 1), (1, 1), (2, 3)])
    sub = encrypt_dataset(log, KEY)
    raw = sub.to_message().encode()
    assert raw[4] == MsgType.SUBMISSION
    assert roundtrip_submission(sub) == sub
    msg = delivery_message("peer", [(0, b"abc"), (5, b"")])
    (back,) = decode_frames(msg.encode())
    assert parse_delivery(back) == ("peer", [(0, b"abc"), (5, b"")])
    with pytest.raises(WireError):
        LabeledSet.from_message(msg)
    with pytest.raises(WireError):
        parse_delivery(sub.to_message())
    with pytest.raises(WireError):
        LabeledSet.from_message(Message(MsgType.SUBMISSION, sub.to_message().payload + b"x"))


def test_misrouted_record_fails_authentication():
    logs = {"a": make_log("a", [(0, 1), (0, 2)]), "b": make_log("b", [(1, 1), (1, 2)])}
    subs, stores = _setup(logs)
    buf = sta_o2o([subs["a"], subs["b"]])
    entries = list(buf.deliveries(["a", "b"], "a")["b"])
    swapped = [(entries[0][0], entries[1][1]), (entries[1][0], entries[0][1])]
    with pytest.raises(ServerAidedError, match="authentication"):
        log_sharing({"b": swapped}, subs["a"], stores["a"])
    with pytest.raises(ServerAidedError):
        log_sharing({"b": [(99, entries[0][1])]}, subs["a"], stores["a"])
