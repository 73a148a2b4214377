from __future__ import annotations

import random
import struct

import numpy as np
import pytest

from hybridcpb.psi import (
    Ed25519Group,
    GroupError,
    ModPGroup,
    ProtocolAbort,
    PsiCaClient,
    PsiCaServer,
    PsiDtClient,
    PsiDtServer,
    group_by_name,
    mutual_psi_ca,
    mutual_psi_dt,
    psi_ca,
    psi_dt,
    run_in_process,
)
from hybridcpb.psi.groups import X25519Group, group_by_id
from hybridcpb.psi.wire import (
    AbortReason,
    Message,
    MsgType,
    ProtocolId,
    WireError,
    decode_frames,
    element_batch,
    hello,
    parse_element_batch,
    parse_hello,
    parse_record_batch,
    record_batch,
)


def test_cardinality_fixtures():
    assert psi_ca({1, 2, 3}, {2, 3, 4}).result == 2
    assert psi_ca({1, 2}, {3, 4}).result == 0
    assert psi_ca(set(), {3, 4}).result == 0
    assert psi_ca({1}, set()).result == 0


def test_data_transfer_fixtures():
    server = {"b": b"beta", "c": b"gamma", "d": b"delta"}
    assert psi_dt({"a", "b", "c"}, server).result == {"b": b"beta", "c": b"gamma"}
    assert psi_dt(set(), server).result == {}
    assert psi_dt({"a"}, {}).result == {}


def test_random_sets_match_oracle():
    rng = np.random.default_rng(0)
    for trial in range(8):
        a = set(rng.integers(0, 2**24, int(rng.integers(0, 300))).tolist())
        b = set(rng.integers(0, 2**24, int(rng.integers(0, 300))).tolist()) | set(list(a)[: trial * 5])
        assert psi_ca(a, b).result == len(a & b)
        recs = {s: struct.pack(">I", s ^ 0xABCDEF) for s in b}
        assert psi_dt(a, recs).result == {s: recs[s] for s in a & b}


def test_modp_group_behind_flag():
    g = ModPGroup(exponent_bits=64)
    assert psi_dt({1, 2, 3}, {2: b"x", 5: b"y"}, group=g).result == {2: b"x"}
    assert psi_ca({1, 2, 3}, {2, 3, 4}, group=ModPGroup()).result == 2
    assert isinstance(group_by_name("modp"), ModPGroup)
    with pytest.raises(ValueError):
        group_by_name("p256")
    with pytest.raises(GroupError):
        group_by_id(99)


def test_dt_refuses_group_without_inverses():
    with pytest.raises(ValueError):
        PsiDtClient({1}, X25519Group())


def test_socket_transport():
    assert psi_ca({1, 2, 3}, {2, 3, 4}, transport="socket").result == 2
    assert psi_dt({"a", "b"}, {"b": b"B"}, transport="socket").result == {"b": b"B"}
    with pytest.raises(ValueError):
        psi_ca({1}, {1}, transport="carrier-pigeon")


def test_mutual_variants_are_symmetric():
    m = mutual_psi_ca({1, 2, 3}, {2, 3, 4})
    assert m.a_result == m.b_result == 2
    single = psi_ca({1, 2, 3}, {2, 3, 4}).total_bytes
    assert abs(m.total_bytes - 2 * single) <= 0.25 * 2 * single
    d = mutual_psi_dt({"a": b"1", "b": b"2"}, {"b": b"3", "c": b"4"})
    assert d.a_result == {"b": b"3"} and d.b_result == {"b": b"2"}


def test_seeded_runs_are_reproducible():
    one = psi_ca({1, 2, 3}, {2, 3, 4}, rng=random.Random(5))
    two = psi_ca({1, 2, 3}, {2, 3, 4}, rng=random.Random(5))
    assert one.messages == two.messages
    three = psi_dt({1, 2}, {2: b"z"}, rng=random.Random(5))
    assert three.messages == psi_dt({1, 2}, {2: b"z"}, rng=random.Random(5)).messages
    assert one.messages != psi_ca({1, 2, 3}, {2, 3, 4}, rng=random.Random(6)).messages


def test_transcript_lengths_do_not_depend_on_content():
    server = set(range(1000, 1050))
    x = psi_ca(set(range(20)), server)
    y = psi_ca(set(range(500, 520)), server)
    assert [len(m) for m in x.messages] == [len(m) for m in y.messages]


def test_wire_bytes_grow_linearly():
    sizes = [50, 100, 200, 400]
    total = [psi_ca(range(n), range(n // 2, n + n // 2)).total_bytes for n in sizes]
    slope = (total[-1] - total[0]) / (sizes[-1] - sizes[0])
    for n, t in zip(sizes, total):
        assert t == pytest.approx(total[0] + slope * (n - sizes[0]), abs=1)


def test_frame_encoding_roundtrip():
    msg = hello(7, ProtocolId.PSI_DT, 1)
    raw = msg.encode()
    assert raw[:5] == struct.pack(">IB", len(msg.payload), MsgType.HELLO)
    assert decode_frames(raw + raw) == [msg, msg]
    assert parse_hello(msg) == (7, ProtocolId.PSI_DT, 1)
    batch = element_batch(MsgType.BLINDED_BATCH, [b"\x01" * 32, b"\x02" * 32], 32)
    assert parse_element_batch(batch, 32) == [b"\x01" * 32, b"\x02" * 32]
    recs = record_batch([(b"t" * 32, b"abc"), (b"u" * 32, b"")], 32)
    assert parse_record_batch(recs, 32) == [(b"t" * 32, b"abc"), (b"u" * 32, b"")]


@pytest.mark.parametrize(
    "raw",
    [b"\x00\x00", struct.pack(">IB", 10, 2) + b"abc", struct.pack(">IB", 0, 99)],
)
def test_malformed_frames_rejected(raw):
    with pytest.raises(WireError):
        decode_frames(raw)


def test_bad_batch_lengths_rejected():
    with pytest.raises(WireError):
        parse_element_batch(Message(MsgType.BLINDED_BATCH, b"\x00\x00\x00\x02" + b"x" * 33), 32)


def test_server_aborts_on_wrong_phase():
    server = PsiCaServer({1, 2})
    with pytest.raises(ProtocolAbort) as info:
        server.receive([hello(1, ProtocolId.PSI_CA, server.group.group_id)])
    assert info.value.reason is AbortReason.WRONG_PHASE
    assert info.value.reply[0].type is MsgType.ABORT
    # a second flight after abort is refused as well
    client = PsiCaClient({1})
    with pytest.raises(ProtocolAbort):
        server.receive(client.start())


def test_client_refuses_double_start_and_early_response():
    c = PsiCaClient({1})
    with pytest.raises(ProtocolAbort):
        c.receive([hello(1, ProtocolId.PSI_CA, 3)])
    with pytest.raises(ProtocolAbort):
        c.start()  # aborted sessions stay dead
    fresh = PsiCaClient({1})
    fresh.start()
    with pytest.raises(ProtocolAbort):
        fresh.start()


def test_protocol_or_group_mismatch_aborts():
    client = PsiCaClient({1, 2}, Ed25519Group())
    server = PsiDtServer({1: b"x"})
    with pytest.raises(ProtocolAbort) as info:
        server.receive(client.start())
    assert info.value.reason is AbortReason.UNSUPPORTED


def test_invalid_group_element_aborts():
    server = PsiDtServer({1: b"x"})
    junk = element_batch(MsgType.BLINDED_BATCH, [b"\xff" * 32], 32)
    with pytest.raises(ProtocolAbort) as info:
        server.receive([hello(1, ProtocolId.PSI_DT, server.group.group_id), junk])
    assert info.value.reason is AbortReason.BAD_ELEMENT


def test_size_mismatch_with_hello_aborts():
    client = PsiDtClient({1, 2})
    hello_msg, batch = client.start()
    server = PsiDtServer({1: b"x"})
    with pytest.raises(ProtocolAbort) as info:
        server.receive([hello(5, ProtocolId.PSI_DT, server.group.group_id), batch])
    assert info.value.reason is AbortReason.MALFORMED


def test_tampered_record_fails_authentication():
    client, server = PsiDtClient({1, 2}), PsiDtServer({1: b"secret"})
    reply = server.receive(client.start())
    (tag, blob), = parse_record_batch(reply[2], 32)
    bad = record_batch([(tag, bytes([blob[0] ^ 1]) + blob[1:])], 32)
    with pytest.raises(ProtocolAbort) as info:
        client.receive([reply[0], reply[1], bad])
    assert info.value.reason is AbortReason.DECRYPT_FAILED


def test_peer_abort_propagates():
    client = PsiCaClient({1})
    client.start()
    with pytest.raises(ProtocolAbort):
        client.receive([Message(MsgType.ABORT, bytes([AbortReason.MALFORMED]))])


def test_in_process_driver_counts_bytes():
    out = run_in_process(PsiCaClient({1, 2, 3}), PsiCaServer({3, 4}))
    assert out.result == 1
    assert out.client.bytes_sent == out.server.bytes_received
    assert out.server.bytes_sent == out.client.bytes_received
    assert out.total_bytes == sum(len(m) for m in out.messages)
