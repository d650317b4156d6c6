"""Per-switch packet processing state machine.

A switch applies reads and writes against its local store, rewrites chain
routing headers, and (as a neighbor of a failed switch) intercepts packets
addressed to the failed switch: bypassing it, converting to a reply when the
failed switch was the final hop, holding traffic during recovery stop
phases, or redirecting to an activated replacement.

Writes are serialized by (session, seq): the chain head stamps each write
with its session and the slot's next sequence number; every other switch
applies a write only if its stamp is lexicographically newer than the slot's.
A write whose stamp is (0, 0) has not been stamped yet, so whichever switch
is currently acting as head for the key stamps it.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

from . import store as store_mod
from .wire import FLAG_CAS_FAIL, FLAG_NOT_FOUND, OpCode, Packet, u32_to_ip

HELD_CAP = 64  # buffered packets per stopped destination; beyond this, drop

Emit = tuple[str, Packet]  # (destination ip, packet)

_QUERY_OPS = (OpCode.READ, OpCode.WRITE, OpCode.CAS, OpCode.INSERT, OpCode.DELETE)
_WRITE_OPS = (OpCode.WRITE, OpCode.CAS)


class ProtocolError(Exception):
    pass


class SwitchStatus(enum.Enum):
    ALIVE = "alive"
    FAILED = "failed"
    RECOVERED = "recovered"


class RuleMode(enum.Enum):
    BYPASS = "bypass"  # next chain hop, or reply-convert when none remains
    REDIRECT = "redirect"  # rewrite to replacement switch, no pop


@dataclass(frozen=True)
class FailoverRule:
    match_dst: str
    mode: RuleMode
    priority: int = 0
    target: Optional[str] = None  # REDIRECT only
    # REDIRECT only: virtual groups already switched over to the target.
    # Keys in other groups keep the bypass behavior until their group is
    # activated.  None means every group.
    groups: Optional[frozenset[int]] = None


@dataclass(frozen=True)
class StopRule:
    """Hold traffic addressed to a failed switch during a recovery stop
    phase.  groups=None stops every key; hold_reads is set for tail
    recovery, where reads must stop too."""

    groups: Optional[frozenset[int]] = None
    hold_reads: bool = False


@dataclass
class Mutations:
    """Deliberate protocol defects for the checker soundness harness."""

    disable_seq_guard: bool = False
    skip_session_bump: bool = False
    activate_before_sync: bool = False


@dataclass
class SwitchState:
    ip: str
    store: store_mod.KVStore = field(default_factory=store_mod.KVStore)
    status: SwitchStatus = SwitchStatus.ALIVE
    rules: dict[str, FailoverRule] = field(default_factory=dict)
    stops: dict[str, StopRule] = field(default_factory=dict)
    held: dict[str, list[Packet]] = field(default_factory=dict)
    session: int = 0
    # Set when this switch has been replaced (status RECOVERED).
    write_fwd: Optional[str] = None
    read_fwd: Optional[str] = None
    controller_ip: Optional[str] = None
    group_of: Optional[Callable[[bytes], int]] = None
    counters: dict[str, int] = field(default_factory=dict)
    mutations: Mutations = field(default_factory=Mutations)

    def count(self, name: str, n: int = 1) -> None:
        self.counters[name] = self.counters.get(name, 0) + n


def _reply(pkt: Packet, session: int, seq: int, value: bytes, flags: int = 0) -> Emit:
    out = Packet(
        op=OpCode.REPLY,
        key=pkt.key,
        client_id=pkt.client_id,
        req_id=pkt.req_id,
        session=session,
        seq=seq,
        chain=(),
        value=value,
        flags=flags,
    )
    return (u32_to_ip(pkt.client_id), out)


def _forward_or_reply(pkt: Packet) -> Emit:
    if pkt.sc > 0:
        nxt, popped = pkt.pop_hop()
        return (nxt, popped)
    return _reply(pkt, pkt.session, pkt.seq, pkt.value)


def _cas_owner(value: bytes) -> int:
    if len(value) < 4:
        return 0
    return int.from_bytes(value[:4], "big")


def process(
    state: SwitchState, pkt: Packet, is_head: bool, is_tail: bool
) -> list[Emit]:
    """Handle a packet addressed to this switch; returns emitted packets.

    is_head / is_tail are this switch's current roles for the packet's key,
    derived from the effective chain by the delivery context.
    """
    if state.status != SwitchStatus.ALIVE:
        raise ProtocolError(f"process() on {state.status.value} switch {state.ip}")

    op = pkt.op
    if op == OpCode.READ:
        try:
            loc = state.store.lookup(pkt.key)
        except store_mod.NotFound:
            state.count("read_not_found")
            return [_reply(pkt, 0, 0, b"", FLAG_NOT_FOUND)]
        value, session, seq, valid = state.store.read_slot(loc)
        if not valid:
            state.count("read_tombstoned")
            return [_reply(pkt, 0, 0, b"", FLAG_NOT_FOUND)]
        return [_reply(pkt, session, seq, value)]

    if op in _WRITE_OPS:
        try:
            loc = state.store.lookup(pkt.key)
        except store_mod.NotFound:
            state.count("write_no_slot")
            return [_reply(pkt, 0, 0, b"", FLAG_NOT_FOUND)]
        if pkt.sc == 0 and not is_tail:
            state.count("drop_malformed_chain")
            return []
        value, s_session, s_seq, valid = state.store.read_slot(loc)
        stamped = pkt.session != 0 or pkt.seq != 0
        if not stamped:
            # An unstamped write is at its effective head: clients address
            # writes to the head, and failover rules preserve that, so the
            # head test is a property of the packet, not of ring position.
            if not is_head:
                state.count("stamp_off_head")
            if op == OpCode.CAS:
                owner = _cas_owner(value) if valid else 0
                if owner != 0 and owner != pkt.client_id:
                    state.count("cas_fail")
                    return [_reply(pkt, s_session, s_seq, value, FLAG_CAS_FAIL)]
            new_session = max(state.session, s_session)
            new_seq = s_seq + 1
            pkt = replace(pkt, session=new_session, seq=new_seq)
            state.store.write_slot(loc, pkt.value, new_session, new_seq)
            return [_forward_or_reply(pkt)]
        # Stamped write: apply only if strictly newer than the slot.
        if state.mutations.disable_seq_guard or (pkt.session, pkt.seq) > (
            s_session,
            s_seq,
        ):
            state.store.write_slot(loc, pkt.value, pkt.session, pkt.seq)
            return [_forward_or_reply(pkt)]
        state.count("drop_seq_guard")
        return []

    if op in (OpCode.INSERT, OpCode.DELETE):
        if state.controller_ip is None:
            state.count("drop_no_controller")
            return []
        return [(state.controller_ip, pkt)]

    state.count("drop_unexpected_op")
    return []


def intercept(state: SwitchState, pkt: Packet, dst: str) -> list[Emit]:
    """Apply this switch's failover/recovery rule to a packet addressed to
    another switch.  May buffer the packet (stop phase) and emit nothing."""
    rule = state.rules.get(dst)
    if rule is None:
        raise ProtocolError(f"{state.ip} has no rule matching dst {dst}")
    if pkt.op not in _QUERY_OPS:
        state.count("drop_intercept_non_query")
        return []

    stop = state.stops.get(dst)
    if stop is not None and _stop_applies(state, stop, pkt):
        bucket = state.held.setdefault(dst, [])
        if len(bucket) < HELD_CAP:
            bucket.append(pkt)
            state.count("held")
        else:
            state.count("held_overflow_drop")
        return []

    if rule.mode == RuleMode.REDIRECT and _redirect_applies(state, rule, pkt):
        state.count("redirected")
        return [(rule.target, pkt)]

    state.count("bypassed")
    if pkt.sc > 0:
        nxt, popped = pkt.pop_hop()
        return [(nxt, popped)]
    # Failed switch was the final hop.  Writes were applied by every live
    # chain member already, so acknowledge; a read with no hop left has no
    # surviving replica to serve it.
    if pkt.op in _WRITE_OPS:
        return [_reply(pkt, pkt.session, pkt.seq, pkt.value)]
    return [_reply(pkt, 0, 0, b"", FLAG_NOT_FOUND)]


def _redirect_applies(state: SwitchState, rule: FailoverRule, pkt: Packet) -> bool:
    if rule.groups is None:
        return True
    if state.group_of is None:
        return True
    return state.group_of(pkt.key) in rule.groups


def _stop_applies(state: SwitchState, stop: StopRule, pkt: Packet) -> bool:
    if pkt.op == OpCode.READ and not stop.hold_reads:
        return False
    if stop.groups is None:
        return True
    if state.group_of is None:
        return True
    return state.group_of(pkt.key) in stop.groups


def set_status(
    state: SwitchState,
    status: SwitchStatus,
    write_fwd: Optional[str] = None,
    read_fwd: Optional[str] = None,
) -> None:
    state.status = status
    state.write_fwd = write_fwd
    state.read_fwd = read_fwd


def install_rule(state: SwitchState, rule: FailoverRule) -> None:
    existing = state.rules.get(rule.match_dst)
    if existing is None or rule.priority >= existing.priority:
        state.rules[rule.match_dst] = rule


def remove_rule(state: SwitchState, match_dst: str) -> None:
    state.rules.pop(match_dst, None)


def set_stop(state: SwitchState, match_dst: str, stop: StopRule) -> None:
    state.stops[match_dst] = stop


def clear_stop(state: SwitchState, match_dst: str) -> list[Packet]:
    """Remove the stop rule and return the packets it was holding; the
    caller re-runs them through intercept() against the updated rules."""
    state.stops.pop(match_dst, None)
    return state.held.pop(match_dst, [])


def bump_session(state: SwitchState, session: int) -> None:
    state.session = max(state.session, session)
