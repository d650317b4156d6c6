"""Host-side agent: key-value and lock API over the packet protocol.

The Agent core is sans-IO: callers feed it replies and clock ticks, and it
hands back packets to transmit.  The same core drives both the discrete-event
simulator (virtual time) and the UDP runtime (wall clock, via SyncAgent).

Reads address the chain tail and carry the reversed chain minus the tail;
writes address the head and carry the rest of the chain in order.  Requests
are retried with the same req_id on timeout; replies are deduplicated by
req_id, so a request never yields two completed results.  The chain map is
re-pulled lazily after a timeout, which is how agents learn about
reconfigurations.

Locks are CAS values holding the 4-byte owner client id, 0 = unowned.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

from .placement import Ring, chain_for_key
from .wire import (
    FLAG_CAS_FAIL,
    FLAG_NOT_FOUND,
    KEY_SIZE,
    OpCode,
    Packet,
    ip_to_u32,
)

UNLOCKED = b"\x00\x00\x00\x00"

Emit = tuple[str, Packet]


class ClientError(Exception):
    pass


class AgentBusy(ClientError):
    """A serial agent was asked to start an op with one still pending."""


def normalize_key(key: bytes) -> bytes:
    if len(key) > KEY_SIZE:
        raise ClientError(f"key longer than {KEY_SIZE} bytes")
    return key.ljust(KEY_SIZE, b"\x00")


def build_request(
    op: OpCode,
    key: bytes,
    value: bytes,
    client_id: int,
    req_id: int,
    chain: tuple[str, ...],
) -> Emit:
    """Address an op to its chain: reads go to the tail carrying the
    reversed chain minus the tail; everything else goes to the head carrying
    the rest of the chain in order."""
    if op == OpCode.READ:
        dst = chain[-1]
        hops = tuple(reversed(chain[:-1]))
    else:
        dst = chain[0]
        hops = tuple(chain[1:])
    return dst, Packet(
        op=op,
        key=key,
        client_id=client_id,
        req_id=req_id,
        chain=hops,
        value=value,
    )


def lock_value(client_id: int) -> bytes:
    return client_id.to_bytes(4, "big")


@dataclass
class AgentConfig:
    client_ip: str
    timeout_us: int = 10_000
    max_retries: int = 5

    def __post_init__(self):
        if self.timeout_us <= 0:
            raise ClientError("timeout must be positive")
        if self.max_retries < 0:
            raise ClientError("max retries must be >= 0")


@dataclass(frozen=True)
class HistoryEvent:
    client_id: int
    req_id: int
    kind: str  # invoke | complete
    op: str
    key: bytes
    value: bytes
    session: int
    seq: int
    ts: int
    status: str = ""  # complete only: ok | not_found | cas_fail


@dataclass(frozen=True)
class Result:
    status: str  # ok | not_found | cas_fail | timeout
    op: str
    key: bytes
    value: bytes = b""
    session: int = 0
    seq: int = 0
    req_id: int = 0

    @property
    def ok(self) -> bool:
        return self.status == "ok"


@dataclass
class _Pending:
    op: OpCode
    op_name: str
    key: bytes
    value: bytes
    req_id: int
    deadline: int
    retries_left: int


class Agent:
    """One logical client; strictly serial (one outstanding op)."""

    def __init__(
        self,
        ring_provider: Callable[[], Ring],
        config: AgentConfig,
        chain_provider: Optional[Callable[[bytes], tuple[str, ...]]] = None,
    ):
        self.ring_provider = ring_provider
        self.chain_provider = chain_provider
        self.config = config
        self.client_id = ip_to_u32(config.client_ip)
        self.history: list[HistoryEvent] = []
        self._pending: Optional[_Pending] = None
        self._next_req = 1
        self._done_reqs: set[int] = set()

    # ------------------------------------------------------------------ starts

    def begin_read(self, key: bytes, now: int) -> list[Emit]:
        return self._begin(OpCode.READ, "read", key, b"", now)

    def begin_write(self, key: bytes, value: bytes, now: int) -> list[Emit]:
        return self._begin(OpCode.WRITE, "write", key, value, now)

    def begin_cas(self, key: bytes, value: bytes, now: int) -> list[Emit]:
        return self._begin(OpCode.CAS, "cas", key, value, now)

    def begin_insert(self, key: bytes, value: bytes, now: int) -> list[Emit]:
        return self._begin(OpCode.INSERT, "insert", key, value, now)

    def begin_delete(self, key: bytes, now: int) -> list[Emit]:
        return self._begin(OpCode.DELETE, "delete", key, b"", now)

    def begin_lock_acquire(self, key: bytes, now: int) -> list[Emit]:
        return self._begin(OpCode.CAS, "acquire", key, lock_value(self.client_id), now)

    def begin_lock_release(self, key: bytes, now: int) -> list[Emit]:
        return self._begin(OpCode.CAS, "release", key, UNLOCKED, now)

    def _begin(
        self, op: OpCode, op_name: str, key: bytes, value: bytes, now: int
    ) -> list[Emit]:
        if self._pending is not None:
            raise AgentBusy(f"op {self._pending.op_name} still outstanding")
        key = normalize_key(key)
        req_id = self._next_req
        self._next_req += 1
        self._pending = _Pending(
            op=op,
            op_name=op_name,
            key=key,
            value=value,
            req_id=req_id,
            deadline=now + self.config.timeout_us,
            retries_left=self.config.max_retries,
        )
        self.history.append(
            HistoryEvent(
                client_id=self.client_id,
                req_id=req_id,
                kind="invoke",
                op=op_name,
                key=key,
                value=value,
                session=0,
                seq=0,
                ts=now,
            )
        )
        return self._emits()

    def _emits(self) -> list[Emit]:
        p = self._pending
        chain = self._chain(p.key)
        if not chain:
            return []  # nothing reachable; the op will time out
        return [build_request(p.op, p.key, p.value, self.client_id, p.req_id, chain)]

    def _chain(self, key: bytes) -> tuple[str, ...]:
        if self.chain_provider is not None:
            return self.chain_provider(key)
        return chain_for_key(self.ring_provider(), key)

    # ------------------------------------------------------------------ events

    def on_reply(self, pkt: Packet, now: int) -> Optional[Result]:
        """Feed a received packet; returns the op result if this completes
        the outstanding op, else None (stale or duplicate)."""
        if pkt.op != OpCode.REPLY:
            return None
        if pkt.req_id in self._done_reqs:
            return None
        p = self._pending
        if p is None or pkt.req_id != p.req_id:
            return None
        if pkt.flags & FLAG_NOT_FOUND:
            status = "not_found"
        elif pkt.flags & FLAG_CAS_FAIL:
            status = "cas_fail"
        else:
            status = "ok"
        self._done_reqs.add(p.req_id)
        self._pending = None
        self.history.append(
            HistoryEvent(
                client_id=self.client_id,
                req_id=p.req_id,
                kind="complete",
                op=p.op_name,
                key=p.key,
                value=pkt.value,
                session=pkt.session,
                seq=pkt.seq,
                ts=now,
                status=status,
            )
        )
        return Result(
            status=status,
            op=p.op_name,
            key=p.key,
            value=pkt.value,
            session=pkt.session,
            seq=pkt.seq,
            req_id=p.req_id,
        )

    def on_tick(self, now: int) -> tuple[list[Emit], Optional[Result]]:
        """Advance the retry clock.  Returns (packets to send, timed-out
        result).  Retries re-pull the chain map, keeping the same req_id."""
        p = self._pending
        if p is None or now < p.deadline:
            return [], None
        if p.retries_left <= 0:
            self._pending = None
            return [], Result(status="timeout", op=p.op_name, key=p.key, req_id=p.req_id)
        p.retries_left -= 1
        p.deadline = now + self.config.timeout_us
        return self._emits(), None

    def next_deadline(self) -> Optional[int]:
        return self._pending.deadline if self._pending else None

    def pending_req(self) -> Optional[int]:
        return self._pending.req_id if self._pending else None

    @property
    def idle(self) -> bool:
        return self._pending is None


# ---------------------------------------------------------------------- 2PL


class TwoPhaseLocking:
    """Per-transaction lock workload: acquire one hot lock (drawn from the
    first ceil(1/contention_index) hot keys) plus locks_per_txn-1 cold locks,
    then release everything.  Any failed acquire aborts the transaction:
    held locks are released and the transaction retries with a fresh draw.

    Drive it by alternating next_op() / feed(ok)."""

    def __init__(
        self,
        hot_keys: list[bytes],
        cold_keys: list[bytes],
        contention_index: float,
        rng,
        locks_per_txn: int = 10,
        max_txns: int = 0,
    ):
        if not 0 < contention_index <= 1:
            raise ClientError("contention index must be in (0, 1]")
        hot_count = min(len(hot_keys), max(1, math.ceil(1.0 / contention_index)))
        self.hot_pool = hot_keys[:hot_count]
        self.cold_keys = cold_keys
        self.locks_per_txn = locks_per_txn
        self.rng = rng
        self.max_txns = max_txns
        self.attempted = 0
        self.committed = 0
        self.aborts = 0
        self._locks: list[bytes] = []
        self._held: list[bytes] = []
        self._mode = "idle"  # idle | acquiring | releasing | aborting
        self._cursor = 0

    def done(self) -> bool:
        return (
            self.max_txns > 0
            and self.committed >= self.max_txns
            and self._mode == "idle"
        )

    def next_op(self) -> Optional[tuple[str, bytes]]:
        if self._mode == "idle":
            if self.done():
                return None
            self._start_txn()
        if self._mode == "acquiring":
            return ("acquire", self._locks[self._cursor])
        return ("release", self._held[self._cursor])

    def feed(self, ok: bool) -> None:
        if self._mode == "acquiring":
            if ok:
                self._held.append(self._locks[self._cursor])
                self._cursor += 1
                if self._cursor == len(self._locks):
                    self.committed += 1
                    self._begin_release("releasing")
            else:
                self.aborts += 1
                if self._held:
                    self._begin_release("aborting")
                else:
                    self._mode = "idle"
        elif self._mode in ("releasing", "aborting"):
            self._cursor += 1
            if self._cursor == len(self._held):
                self._mode = "idle"
                self._held = []

    def _start_txn(self) -> None:
        self.attempted += 1
        hot = self.hot_pool[self.rng.randrange(len(self.hot_pool))]
        cold = self.rng.sample(self.cold_keys, self.locks_per_txn - 1)
        self._locks = [hot] + cold
        self._held = []
        self._cursor = 0
        self._mode = "acquiring"

    def _begin_release(self, mode: str) -> None:
        self._mode = mode
        self._cursor = 0


def txn_2pl(
    sync_client,
    hot_locks: list[bytes],
    cold_locks: list[bytes],
    contention_index: float,
    txns: int,
    rng,
) -> int:
    """Run the 2PL workload over a blocking client (lock_acquire /
    lock_release methods); returns the committed transaction count."""
    wl = TwoPhaseLocking(hot_locks, cold_locks, contention_index, rng, max_txns=txns)
    while not wl.done():
        op = wl.next_op()
        if op is None:
            break
        kind, key = op
        if kind == "acquire":
            wl.feed(sync_client.lock_acquire(key))
        else:
            wl.feed(sync_client.lock_release(key))
    return wl.committed


# ------------------------------------------------------------------- history

HISTORY_COLUMNS = (
    "client_id req_id kind op key value session seq ts status".split()
)


def history_dumps(events) -> str:
    lines = []
    for e in events:
        lines.append(
            "\t".join(
                [
                    str(e.client_id),
                    str(e.req_id),
                    e.kind,
                    e.op,
                    e.key.hex(),
                    e.value.hex(),
                    str(e.session),
                    str(e.seq),
                    str(e.ts),
                    e.status,
                ]
            )
        )
    return "\n".join(lines) + ("\n" if lines else "")


def history_loads(text: str) -> list[HistoryEvent]:
    events = []
    for ln, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != len(HISTORY_COLUMNS):
            raise ClientError(f"history line {ln}: expected {len(HISTORY_COLUMNS)} fields")
        events.append(
            HistoryEvent(
                client_id=int(parts[0]),
                req_id=int(parts[1]),
                kind=parts[2],
                op=parts[3],
                key=bytes.fromhex(parts[4]),
                value=bytes.fromhex(parts[5]),
                session=int(parts[6]),
                seq=int(parts[7]),
                ts=int(parts[8]),
                status=parts[9],
            )
        )
    return events
