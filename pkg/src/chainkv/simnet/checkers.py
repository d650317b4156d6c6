"""Safety checkers over client histories and switch states.

- check_consistency: any single client's completed operations on a key carry
  non-decreasing (session, seq) version stamps.
- check_update_propagation: for every key, each live chain member's stored
  version is >= its successor's, substituting activated replacements for
  recovered switches and skipping failed, unreplaced ones.
- check_linearizable_register: brute-force linearizability for single
  register semantics, independent of version stamps (values and real-time
  order only).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from ..dataplane import SwitchStatus


@dataclass(frozen=True)
class ConsistencyViolation:
    client_id: int
    key: bytes
    earlier: tuple[int, int]
    later: tuple[int, int]
    earlier_req: int
    later_req: int

    def __str__(self):
        return (
            f"client {self.client_id} key {self.key.hex()} observed "
            f"{self.earlier} (req {self.earlier_req}) then {self.later} "
            f"(req {self.later_req})"
        )


@dataclass(frozen=True)
class PropagationViolation:
    key: bytes
    upstream: str
    downstream: str
    up_version: tuple[int, int]
    down_version: tuple[int, int]

    def __str__(self):
        return (
            f"key {self.key.hex()}: upstream {self.upstream}={self.up_version} "
            f"< downstream {self.downstream}={self.down_version}"
        )


def check_consistency(events) -> Optional[ConsistencyViolation]:
    """events: HistoryEvents in per-client order (a merged log is fine as
    long as each client's own events keep their relative order).  Only
    completes with status 'ok' carry meaningful versions."""
    last: dict[tuple[int, bytes], tuple[int, int, int]] = {}
    for e in events:
        if e.kind != "complete" or e.status != "ok":
            continue
        who = (e.client_id, e.key)
        ver = (e.session, e.seq)
        prev = last.get(who)
        if prev is not None and ver < prev[:2]:
            return ConsistencyViolation(
                client_id=e.client_id,
                key=e.key,
                earlier=prev[:2],
                later=ver,
                earlier_req=prev[2],
                later_req=e.req_id,
            )
        last[who] = (e.session, e.seq, e.req_id)
    return None


def check_update_propagation(
    states: dict[str, dict[bytes, tuple[int, int]]],
    chainmap: dict[bytes, tuple[str, ...]],
    statuses: dict[str, SwitchStatus],
    replacements: Optional[dict[str, str]] = None,
    activated_groups: Optional[dict[str, set[int]]] = None,
    group_of=None,
) -> Optional[PropagationViolation]:
    """states: per switch, per key (session, seq).  chainmap: base chain per
    key.  A failed switch counts via its replacement once the key's group is
    activated, and is skipped entirely before that."""
    replacements = replacements or {}
    activated_groups = activated_groups or {}
    for key, chain in chainmap.items():
        gid = group_of(key) if group_of else None
        resolved = []
        for sw in chain:
            st = statuses.get(sw, SwitchStatus.ALIVE)
            if st == SwitchStatus.ALIVE:
                resolved.append(sw)
                continue
            rep = replacements.get(sw)
            if rep is None:
                continue
            done = activated_groups.get(sw)
            if done is None or gid is None or gid in done:
                resolved.append(rep)
        prev_sw = None
        prev_ver = None
        for sw in resolved:
            ver = states.get(sw, {}).get(key, (0, 0))
            if prev_ver is not None and ver > prev_ver:
                return PropagationViolation(
                    key=key,
                    upstream=prev_sw,
                    downstream=sw,
                    up_version=prev_ver,
                    down_version=ver,
                )
            prev_sw, prev_ver = sw, ver
    return None


# ------------------------------------------------------------ linearizability


@dataclass(frozen=True)
class RegisterOp:
    kind: str  # read | write
    value: bytes
    invoke_ts: int
    complete_ts: Optional[int]  # None: pending (effect may or may not apply)
    op_id: int = 0


def check_linearizable_register(
    ops: list[RegisterOp], initial: bytes = b""
) -> bool:
    """Is this single-key history linearizable for a read/write register?

    Wing-Gong search: repeatedly pick a minimal operation (one invoked
    before every undecided operation completes) and try it first in the
    linear order.  Pending writes may be linearized or dropped.
    """
    ops = sorted(ops, key=lambda o: (o.invoke_ts, o.op_id))
    n = len(ops)
    seen: set[tuple[frozenset, bytes]] = set()

    def min_complete(remaining: frozenset) -> Optional[int]:
        best = None
        for i in remaining:
            c = ops[i].complete_ts
            if c is not None and (best is None or c < best):
                best = c
        return best

    def search(remaining: frozenset, value: bytes) -> bool:
        if not remaining:
            return True
        state = (remaining, value)
        if state in seen:
            return False
        seen.add(state)
        horizon = min_complete(remaining)
        for i in sorted(remaining):
            op = ops[i]
            # A candidate must be invoked before every other remaining op
            # completes, or it cannot come first.
            if horizon is not None and op.invoke_ts > horizon:
                break
            rest = remaining - {i}
            if op.kind == "write":
                if search(rest, op.value):
                    return True
                if op.complete_ts is None and search(rest, value):
                    return True  # pending write that never took effect
            else:
                if op.complete_ts is None:
                    # A pending read constrains nothing.
                    if search(rest, value):
                        return True
                elif op.value == value and search(rest, value):
                    return True
        return False

    return search(frozenset(range(n)), initial)


def ops_from_history(events, key: bytes) -> list[RegisterOp]:
    """Pair invoke/complete events for one key into register ops.  Reads
    that completed not_found are represented as reads of the empty value."""
    pending: dict[tuple[int, int], RegisterOp] = {}
    out = []
    counter = 0
    for e in events:
        if e.key != key or e.op not in ("read", "write"):
            continue
        rid = (e.client_id, e.req_id)
        if e.kind == "invoke":
            counter += 1
            pending[rid] = RegisterOp(
                kind=e.op,
                value=e.value,
                invoke_ts=e.ts,
                complete_ts=None,
                op_id=counter,
            )
        else:
            inv = pending.pop(rid, None)
            if inv is None:
                continue
            value = inv.value if e.op == "write" else e.value
            out.append(
                RegisterOp(
                    kind=inv.kind,
                    value=value,
                    invoke_ts=inv.invoke_ts,
                    complete_ts=e.ts,
                    op_id=inv.op_id,
                )
            )
    out.extend(pending.values())
    return out
