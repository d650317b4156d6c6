"""Binary codec for the coordination packet carried as a UDP payload.

Layout (network byte order), field by field:

    offset  size  field
    0       2     magic 0x4E 0x43
    2       1     op byte: low nibble opcode, high nibble flags
    3       4     client_id (u32, requester identity; packed IPv4 in the
                  UDP runtime, used for reply routing and lock ownership)
    7       4     req_id (u32, per-client request nonce for retry dedup)
    11      2     session (u16)
    13      4     seq (u32)
    17      1     sc (u8, number of remaining chain hops)
    18      4*sc  chain (IPv4 addresses, 4 bytes each)
    ...     16    key
    ...     1     val_len (u8)
    ...     v     value (val_len bytes, at most 128)

Total length is always 35 + 4*sc + val_len.  The chain list excludes the
packet's current destination: a normal hop copies chain[0] into the
destination address and pops it.
"""

from __future__ import annotations

import enum
import ipaddress
import struct
from dataclasses import dataclass

MAGIC = b"\x4e\x43"
KEY_SIZE = 16
MAX_CHAIN = 8
MAX_VALUE = 128
MIN_PACKET = 35

FLAG_NOT_FOUND = 0x10
FLAG_CAS_FAIL = 0x20
_KNOWN_FLAGS = FLAG_NOT_FOUND | FLAG_CAS_FAIL

_HEAD = struct.Struct("!2sBIIHIB")  # magic, op, client_id, req_id, session, seq, sc


class OpCode(enum.IntEnum):
    READ = 0x01
    WRITE = 0x02
    REPLY = 0x03
    INSERT = 0x04
    DELETE = 0x05
    CAS = 0x06


class DecodeError(Exception):
    """Malformed packet; `offset` is the byte position of the offending field."""

    def __init__(self, offset: int, message: str):
        super().__init__(f"offset {offset}: {message}")
        self.offset = offset


class BadMagic(DecodeError):
    pass


class BadOp(DecodeError):
    pass


class LengthMismatch(DecodeError):
    pass


class ChainTooLong(DecodeError):
    pass


class ValueTooLong(DecodeError):
    pass


def ip_to_u32(ip: str) -> int:
    return int(ipaddress.IPv4Address(ip))


def u32_to_ip(n: int) -> str:
    return str(ipaddress.IPv4Address(n))


@dataclass(frozen=True)
class Packet:
    """One coordination message.  (session, seq) is the write version stamp;
    it is (0, 0) on anything the head has not stamped yet."""

    op: OpCode
    key: bytes
    client_id: int = 0
    req_id: int = 0
    session: int = 0
    seq: int = 0
    chain: tuple[str, ...] = ()
    value: bytes = b""
    flags: int = 0

    @property
    def sc(self) -> int:
        return len(self.chain)

    def validate(self) -> None:
        if len(self.key) != KEY_SIZE:
            raise ValueError(f"key must be {KEY_SIZE} bytes, got {len(self.key)}")
        if len(self.chain) > MAX_CHAIN:
            raise ValueError(f"chain longer than {MAX_CHAIN}")
        if len(self.value) > MAX_VALUE:
            raise ValueError(f"value longer than {MAX_VALUE} bytes")
        if not 0 <= self.session <= 0xFFFF:
            raise ValueError("session out of u16 range")
        if not 0 <= self.seq <= 0xFFFFFFFF:
            raise ValueError("seq out of u32 range")
        if not 0 <= self.client_id <= 0xFFFFFFFF:
            raise ValueError("client_id out of u32 range")
        if not 0 <= self.req_id <= 0xFFFFFFFF:
            raise ValueError("req_id out of u32 range")
        if self.flags & ~_KNOWN_FLAGS:
            raise ValueError(f"unknown flag bits 0x{self.flags:02x}")
        if self.op == OpCode.READ and self.value:
            raise ValueError("READ requests carry no value")
        if self.op in (OpCode.READ, OpCode.INSERT, OpCode.DELETE) and (
            self.session or self.seq
        ):
            raise ValueError(f"(session, seq) must be zero for {self.op.name}")

    def pop_hop(self) -> tuple[str, "Packet"]:
        """Return (next destination, packet with that hop removed)."""
        nxt = self.chain[0]
        return nxt, replace_chain(self, self.chain[1:])


def replace_chain(pkt: Packet, chain: tuple[str, ...]) -> Packet:
    return Packet(
        op=pkt.op,
        key=pkt.key,
        client_id=pkt.client_id,
        req_id=pkt.req_id,
        session=pkt.session,
        seq=pkt.seq,
        chain=chain,
        value=pkt.value,
        flags=pkt.flags,
    )


def encode(pkt: Packet) -> bytes:
    """Serialize a valid Packet; length is 35 + 4*sc + val_len."""
    pkt.validate()
    parts = [
        _HEAD.pack(
            MAGIC,
            (pkt.flags & 0xF0) | int(pkt.op),
            pkt.client_id,
            pkt.req_id,
            pkt.session,
            pkt.seq,
            len(pkt.chain),
        )
    ]
    for hop in pkt.chain:
        parts.append(ip_to_u32(hop).to_bytes(4, "big"))
    parts.append(pkt.key)
    parts.append(bytes([len(pkt.value)]))
    parts.append(pkt.value)
    return b"".join(parts)


def decode(buf: bytes) -> Packet:
    """Inverse of encode; raises a DecodeError subclass on anything else."""
    if len(buf) < MIN_PACKET:
        raise LengthMismatch(len(buf), f"buffer too short ({len(buf)} < {MIN_PACKET})")
    magic, op_byte, client_id, req_id, session, seq, sc = _HEAD.unpack_from(buf, 0)
    if magic != MAGIC:
        raise BadMagic(0, f"bad magic {magic.hex()}")
    opcode = op_byte & 0x0F
    flags = op_byte & 0xF0
    if not 0x01 <= opcode <= 0x06:
        raise BadOp(2, f"opcode 0x{opcode:02x} outside 0x01..0x06")
    if flags & ~_KNOWN_FLAGS:
        raise BadOp(2, f"unknown flag bits 0x{flags:02x}")
    if sc > MAX_CHAIN:
        raise ChainTooLong(17, f"sc={sc} exceeds {MAX_CHAIN}")
    need = MIN_PACKET + 4 * sc
    if len(buf) < need:
        raise LengthMismatch(18, f"buffer too short for sc={sc} chain")
    chain = tuple(
        u32_to_ip(int.from_bytes(buf[18 + 4 * i : 22 + 4 * i], "big"))
        for i in range(sc)
    )
    key_off = 18 + 4 * sc
    key = buf[key_off : key_off + KEY_SIZE]
    vlen_off = key_off + KEY_SIZE
    val_len = buf[vlen_off]
    if val_len > MAX_VALUE:
        raise ValueTooLong(vlen_off, f"val_len={val_len} exceeds {MAX_VALUE}")
    if len(buf) != need + val_len:
        raise LengthMismatch(
            vlen_off, f"buffer length {len(buf)} != declared {need + val_len}"
        )
    value = buf[vlen_off + 1 :]
    return Packet(
        op=OpCode(opcode),
        key=key,
        client_id=client_id,
        req_id=req_id,
        session=session,
        seq=seq,
        chain=chain,
        value=value,
        flags=flags,
    )
