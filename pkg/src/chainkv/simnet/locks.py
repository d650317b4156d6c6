"""Exhaustive mutual-exclusion check for CAS locks.

Enumerates every pair of per-client op scripts (acquire/release sequences of
a fixed length) and every interleaving of the two clients' turns, executing
each op atomically end-to-end against a fresh replicated chain.  A client
"believes" it holds the lock from a successful acquire until it issues a
release.  Any state with two believers, or a believer that the store does
not record as owner, is a violation.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

from .. import dataplane
from ..client import UNLOCKED, build_request, lock_value, normalize_key
from ..dataplane import SwitchState
from ..store import KVStore
from ..wire import FLAG_CAS_FAIL, OpCode, ip_to_u32

LOCK_KEY = normalize_key(b"lock")


@dataclass
class LockViolation:
    scripts: tuple
    interleaving: tuple
    step: int
    detail: str

    def __str__(self):
        return (
            f"scripts {self.scripts} interleaving {self.interleaving} "
            f"step {self.step}: {self.detail}"
        )


def _fresh_chain(n: int = 3) -> list[SwitchState]:
    states = []
    for i in range(n):
        st = SwitchState(ip=f"10.9.0.{i + 1}", store=KVStore(16))
        st.store.insert_index(LOCK_KEY, UNLOCKED)
        states.append(st)
    return states


def _run_cas(chain: list[SwitchState], client_ip: str, value: bytes, req_id: int) -> bool:
    """Deliver one CAS through the whole chain with no loss; returns CAS
    success.  The reply comes from the tail (or the head on ownership
    failure)."""
    ips = tuple(st.ip for st in chain)
    by_ip = {st.ip: st for st in chain}
    dst, pkt = build_request(
        OpCode.CAS, LOCK_KEY, value, ip_to_u32(client_ip), req_id, ips
    )
    while True:
        st = by_ip[dst]
        is_head = st.ip == ips[0]
        is_tail = st.ip == ips[-1]
        emits = dataplane.process(st, pkt, is_head, is_tail)
        assert len(emits) == 1, "lossless chain must emit exactly one packet"
        dst, pkt = emits[0]
        if pkt.op == OpCode.REPLY:
            return not (pkt.flags & FLAG_CAS_FAIL)


def _stored_owner(chain: list[SwitchState]) -> int:
    tail = chain[-1]
    value, _, _, _ = tail.store.read_slot(tail.store.lookup(LOCK_KEY))
    return int.from_bytes(value[:4], "big")


def exhaustive_lock_check(
    clients: int = 2, ops_per_client: int = 3, chain_len: int = 3
) -> tuple[int, list[LockViolation]]:
    """Returns (executions checked, violations found)."""
    assert clients == 2, "the exhaustive enumeration is written for 2 clients"
    client_ips = ["10.8.0.1", "10.8.0.2"]
    scripts = list(itertools.product(("acquire", "release"), repeat=ops_per_client))
    # Interleavings: positions of client 0's turns among 2L total turns.
    total = 2 * ops_per_client
    interleavings = []
    for positions in itertools.combinations(range(total), ops_per_client):
        turn = [1] * total
        for p in positions:
            turn[p] = 0
        interleavings.append(tuple(turn))

    executions = 0
    violations: list[LockViolation] = []
    for s0, s1 in itertools.product(scripts, scripts):
        for order in interleavings:
            executions += 1
            chain = _fresh_chain(chain_len)
            cursors = [0, 0]
            believers: set[int] = set()
            req_id = 0
            for step, who in enumerate(order):
                script = (s0, s1)[who]
                op = script[cursors[who]]
                cursors[who] += 1
                req_id += 1
                if op == "acquire":
                    ok = _run_cas(
                        chain, client_ips[who], lock_value(ip_to_u32(client_ips[who])), req_id
                    )
                    if ok:
                        believers.add(who)
                else:
                    believers.discard(who)  # issuing release ends belief
                    _run_cas(chain, client_ips[who], UNLOCKED, req_id)
                if len(believers) > 1:
                    violations.append(
                        LockViolation((s0, s1), order, step, "two simultaneous owners")
                    )
                    break
                if believers:
                    owner = _stored_owner(chain)
                    expect = ip_to_u32(client_ips[next(iter(believers))])
                    if owner != expect:
                        violations.append(
                            LockViolation(
                                (s0, s1),
                                order,
                                step,
                                f"believer {expect} but stored owner {owner}",
                            )
                        )
                        break
    return executions, violations
