import random
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chainkv.wire import (
    BadMagic,
    BadOp,
    ChainTooLong,
    DecodeError,
    LengthMismatch,
    OpCode,
    Packet,
    decode,
    encode,
)

TESTDATA = Path(__file__).resolve().parent.parent / "testdata"

GOLDEN_READ = Packet(
    op=OpCode.READ,
    key=b"K".ljust(16, b"\x00"),
    client_id=0x0A000002,
    req_id=7,
    chain=("10.0.0.3",),
)
GOLDEN_WRITE = Packet(
    op=OpCode.WRITE,
    key=b"foo".ljust(16, b"\x00"),
    client_id=0x0A000102,
    req_id=42,
    session=1,
    seq=9,
    chain=("10.0.0.2", "10.0.0.3"),
    value=b"BAR!",
)
GOLDEN_REPLY_NF = Packet(
    op=OpCode.REPLY,
    key=b"K".ljust(16, b"\x00"),
    client_id=0x0A000002,
    req_id=8,
    flags=0x10,
)


@pytest.mark.parametrize(
    "pkt,fixture",
    [
        (GOLDEN_READ, "golden_read.bin"),
        (GOLDEN_WRITE, "golden_write.bin"),
        (GOLDEN_REPLY_NF, "golden_reply_not_found.bin"),
    ],
)
def test_golden_bytes(pkt, fixture):
    golden = (TESTDATA / fixture).read_bytes()
    assert encode(pkt) == golden
    assert decode(golden) == pkt


def test_golden_read_length_and_prefix():
    golden = (TESTDATA / "golden_read.bin").read_bytes()
    assert len(golden) == 35 + 4 * 1 + 0
    assert golden[:3] == b"\x4e\x43\x01"


def test_write_empty_chain_length():
    pkt = Packet(op=OpCode.WRITE, key=b"k".ljust(16, b"\x00"), seq=1, value=b"abcd")
    assert len(encode(pkt)) == 39  # 35 + 0 + 4


def test_canonical_length_formula():
    for sc in range(0, 9):
        for vlen in (0, 1, 64, 128):
            pkt = Packet(
                op=OpCode.WRITE,
                key=bytes(16),
                seq=1,
                chain=tuple(f"10.0.0.{i + 1}" for i in range(sc)),
                value=b"x" * vlen,
            )
            assert len(encode(pkt)) == 35 + 4 * sc + vlen


def test_truncated_buffer_rejected():
    with pytest.raises(LengthMismatch):
        decode(b"\x4e\x43\x01" + b"\x00" * 7)


def test_bad_op_rejected():
    buf = bytearray((TESTDATA / "golden_read.bin").read_bytes())
    buf[2] = 0x09
    with pytest.raises(BadOp) as exc:
        decode(bytes(buf))
    assert exc.value.offset == 2


def test_bad_magic_rejected():
    buf = bytearray((TESTDATA / "golden_read.bin").read_bytes())
    buf[0] = 0xFF
    with pytest.raises(BadMagic) as exc:
        decode(bytes(buf))
    assert exc.value.offset == 0


def test_chain_too_long_rejected():
    buf = bytearray((TESTDATA / "golden_read.bin").read_bytes())
    buf[17] = 9
    buf.extend(b"\x00" * 40)  # enough bytes that only sc is at fault
    with pytest.raises(ChainTooLong):
        decode(bytes(buf))


def test_trailing_garbage_rejected():
    golden = (TESTDATA / "golden_read.bin").read_bytes()
    with pytest.raises(LengthMismatch):
        decode(golden + b"\x00")


def test_validate_rejects_read_with_value():
    pkt = Packet(op=OpCode.READ, key=bytes(16), value=b"x")
    with pytest.raises(ValueError):
        encode(pkt)


def test_validate_rejects_stamped_read():
    pkt = Packet(op=OpCode.READ, key=bytes(16), seq=3)
    with pytest.raises(ValueError):
        encode(pkt)


_ips = st.integers(min_value=0, max_value=0xFFFFFFFF).map(
    lambda n: f"{n >> 24 & 255}.{n >> 16 & 255}.{n >> 8 & 255}.{n & 255}"
)


@st.composite
def packets(draw):
    op = draw(st.sampled_from(list(OpCode)))
    stampable = op in (OpCode.WRITE, OpCode.CAS, OpCode.REPLY)
    value = b""
    if op != OpCode.READ:
        value = draw(st.binary(max_size=128))
    if op == OpCode.DELETE:
        value = b""
    flags = 0
    if op == OpCode.REPLY:
        flags = draw(st.sampled_from([0, 0x10, 0x20]))
    return Packet(
        op=op,
        key=draw(st.binary(min_size=16, max_size=16)),
        client_id=draw(st.integers(0, 0xFFFFFFFF)),
        req_id=draw(st.integers(0, 0xFFFFFFFF)),
        session=draw(st.integers(0, 0xFFFF)) if stampable else 0,
        seq=draw(st.integers(0, 0xFFFFFFFF)) if stampable else 0,
        chain=tuple(draw(st.lists(_ips, max_size=8))),
        value=value,
        flags=flags,
    )


@given(packets())
@settings(max_examples=300)
def test_round_trip(pkt):
    assert decode(encode(pkt)) == pkt


@given(st.binary(max_size=220))
@settings(max_examples=400)
def test_decode_never_crashes_on_fuzz(buf):
    try:
        pkt = decode(buf)
    except DecodeError:
        return
    assert decode(encode(pkt)) == pkt


def test_bulk_random_round_trip_bit_exact():
    rng = random.Random(20260810)
    ops = list(OpCode)
    for _ in range(5000):
        op = ops[rng.randrange(len(ops))]
        stampable = op in (OpCode.WRITE, OpCode.CAS, OpCode.REPLY)
        pkt = Packet(
            op=op,
            key=rng.randbytes(16),
            client_id=rng.getrandbits(32),
            req_id=rng.getrandbits(32),
            session=rng.getrandbits(16) if stampable else 0,
            seq=rng.getrandbits(32) if stampable else 0,
            chain=tuple(
                f"10.0.{rng.randrange(256)}.{rng.randrange(256)}"
                for _ in range(rng.randrange(9))
            ),
            value=rng.randbytes(rng.randrange(129)) if op != OpCode.READ else b"",
        )
        buf = encode(pkt)
        assert decode(buf) == pkt
        assert encode(decode(buf)) == buf
