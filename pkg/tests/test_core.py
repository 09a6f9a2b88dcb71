import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from leasefs import core
from leasefs.core import (
    Gfi,
    Intent,
    LeaseType,
    MalformedFrame,
    decode_message,
    encode_message,
    lease_satisfies,
)

# ---------------------------------------------------------------------------
# Lease strength
# ---------------------------------------------------------------------------

# One row per (held, intent) pair; a write lease satisfies any intent, a
# read lease satisfies only reads, null satisfies nothing.
SATISFIES_TABLE = [
    (LeaseType.NULL, Intent.READ, False),
    (LeaseType.NULL, Intent.WRITE, False),
    (LeaseType.READ, Intent.READ, True),
    (LeaseType.READ, Intent.WRITE, False),
    (LeaseType.WRITE, Intent.READ, True),
    (LeaseType.WRITE, Intent.WRITE, True),
]


@pytest.mark.parametrize("held,intent,expected", SATISFIES_TABLE)
def test_lease_satisfies_exhaustive(held, intent, expected):
    assert lease_satisfies(held, intent) is expected


def test_lease_satisfies_matches_strength_order():
    for held, intent, _ in SATISFIES_TABLE:
        assert lease_satisfies(held, intent) == (int(held) >= int(intent))


# ---------------------------------------------------------------------------
# Gfi ordering
# ---------------------------------------------------------------------------

gfis = st.builds(Gfi, st.integers(0, 2**16 - 1), st.integers(0, 2**64 - 1))


@given(gfis, gfis)
def test_gfi_order_total_and_antisymmetric(a, b):
    assert (a < b) or (b < a) or (a == b)
    if a < b:
        assert not b < a


@given(gfis, gfis, gfis)
def test_gfi_order_transitive(a, b, c):
    if a < b and b < c:
        assert a < c


@given(gfis)
def test_gfi_order_agrees_with_component_tuple(g):
    other = Gfi(g.storage_node_id, g.storage_inode)
    assert g == other
    assert (g.storage_node_id, g.storage_inode) == (other.storage_node_id, other.storage_inode)


@given(gfis, gfis)
def test_gfi_order_is_componentwise_lexicographic(a, b):
    assert (a < b) == (
        (a.storage_node_id, a.storage_inode) < (b.storage_node_id, b.storage_inode)
    )


def test_gfi_str_round_trip():
    g = Gfi(3, 99)
    assert Gfi.parse(str(g)) == g


# ---------------------------------------------------------------------------
# Codec
# ---------------------------------------------------------------------------

def page(n: int) -> bytes:
    return bytes([n % 256]) * core.PAGE_SIZE


MESSAGES = [
    core.Resolve(1, "/a/b"),
    core.ResolveReply(1, Gfi(0, 7), 8192),
    core.Create(2, "x"),
    core.CreateReply(2, Gfi(1, 1)),
    core.ReadPages(3, Gfi(0, 1), (0, 5, 9)),
    core.ReadPagesReply(3, (page(1), page(2)), 12288),
    core.WritePages(4, Gfi(2, 3), ((0, page(7)), (4, page(8)))),
    core.WritePagesReply(4, 20480),
    core.GrantLease(5, Gfi(0, 2), Intent.WRITE, 3),
    core.GrantLeaseReply(5, True, 42),
    core.RemoveOwner(6, Gfi(0, 2), 3),
    core.RemoveOwnerReply(6, 43),
    core.Revoke(7, Gfi(0, 1), 41),
    core.RevokeReply(7, False),
    core.ErrorReply(8, int(core.ErrCode.NOT_FOUND), "missing"),
]


@pytest.mark.parametrize("msg", MESSAGES, ids=lambda m: type(m).__name__)
def test_codec_round_trip(msg):
    assert decode_message(encode_message(msg)) == msg


def test_frame_starts_with_little_endian_body_length():
    frame = encode_message(core.Revoke(7, Gfi(0, 1), 0))
    (body_len,) = struct.unpack("<I", frame[:4])
    assert body_len == len(frame) - 4
    assert frame[4] == core.MsgTag.REVOKE


def test_decode_rejects_empty_frame():
    with pytest.raises(MalformedFrame):
        decode_message(b"")
    with pytest.raises(MalformedFrame):
        decode_message(struct.pack("<I", 0))


def test_decode_rejects_unknown_tag():
    body = bytes([99]) + struct.pack("<Q", 1)
    with pytest.raises(MalformedFrame):
        decode_message(struct.pack("<I", len(body)) + body)


def test_decode_rejects_truncated_and_overlong():
    frame = encode_message(core.Resolve(1, "path"))
    with pytest.raises(MalformedFrame):
        decode_message(frame[:-1])
    with pytest.raises(MalformedFrame):
        decode_message(frame + b"\x00")


def test_decode_rejects_trailing_bytes_in_body():
    frame = bytearray(encode_message(core.RevokeReply(1, True)))
    body = frame[4:] + b"\xff"
    bad = struct.pack("<I", len(body)) + bytes(body)
    with pytest.raises(MalformedFrame):
        decode_message(bad)


def test_decode_rejects_bad_lease_byte():
    good = encode_message(core.GrantLease(1, Gfi(0, 1), Intent.READ, 2))
    bad = bytearray(good)
    bad[4 + 1 + 8 + 10] = 7  # intent byte after tag, req id, gfi
    with pytest.raises(MalformedFrame):
        decode_message(bytes(bad))


# Fuzzed round trips: build arbitrary valid messages and require exact
# reconstruction. The acceptance suite reuses this generator at volume.

node_ids = st.integers(0, 2**16 - 1)
req_ids = st.integers(0, 2**64 - 1)
lengths = st.integers(0, 2**40)
seqs = st.integers(0, 2**32)
paths = st.text(min_size=0, max_size=64)
blocks = st.binary(min_size=0, max_size=256)
intents = st.sampled_from([Intent.READ, Intent.WRITE])

wire_messages = st.one_of(
    st.builds(core.Resolve, req_ids, paths),
    st.builds(core.ResolveReply, req_ids, gfis, lengths),
    st.builds(core.Create, req_ids, paths),
    st.builds(core.CreateReply, req_ids, gfis),
    st.builds(core.ReadPages, req_ids, gfis,
              st.lists(st.integers(0, 2**32), max_size=8).map(tuple)),
    st.builds(core.ReadPagesReply, req_ids,
              st.lists(blocks, max_size=8).map(tuple), lengths),
    st.builds(core.WritePages, req_ids, gfis,
              st.lists(st.tuples(st.integers(0, 2**32), blocks), max_size=8).map(tuple)),
    st.builds(core.WritePagesReply, req_ids, lengths),
    st.builds(core.GrantLease, req_ids, gfis, intents, node_ids),
    st.builds(core.GrantLeaseReply, req_ids, st.booleans(), seqs),
    st.builds(core.RemoveOwner, req_ids, gfis, node_ids),
    st.builds(core.RemoveOwnerReply, req_ids, seqs),
    st.builds(core.Revoke, req_ids, gfis, seqs),
    st.builds(core.RevokeReply, req_ids, st.booleans()),
    st.builds(core.ErrorReply, req_ids, st.integers(0, 2**16 - 1), paths),
)


@settings(max_examples=300)
@given(wire_messages)
def test_codec_round_trips_fuzzed_messages(msg):
    assert decode_message(encode_message(msg)) == msg


@settings(max_examples=100)
@given(wire_messages, st.integers(0, 3))
def test_decoder_never_crashes_on_mutations(msg, cut):
    frame = encode_message(msg)
    mutated = frame[:max(0, len(frame) - cut)]
    try:
        decode_message(mutated)
    except MalformedFrame:
        pass


def test_error_code_maps_back_to_exception_classes():
    for exc_cls, code in core._EXC_TO_ERR.items():
        exc = core.code_to_exception(int(code), "boom")
        assert isinstance(exc, exc_cls)
