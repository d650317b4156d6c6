"""Centralized controller: fast failover, staged failure recovery, and
insert/delete administration.

Failover installs one bypass rule on each physical neighbor of a failed
switch, so degraded chains keep serving with no client involvement.
Recovery restores a chain to f+1 members one virtual group at a time: copy
the live reference switch's state for the group to the replacement while the
degraded chain keeps serving (PRESYNC), hold the group's traffic at the
failed switch's neighbors and re-sync until the replacement matches the
reference exactly (STOPPED), then point the neighbors at the replacement
with a higher-priority rule and release the held traffic (ACTIVATED).

When the failed switch headed any affected chain, the replacement's session
number is bumped above every session the controller has ever issued, so
post-recovery write stamps are strictly larger than pre-failure ones.
"""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field
from typing import Iterator, Optional

from .dataplane import FailoverRule, Mutations, RuleMode, StopRule, SwitchStatus
from .placement import Ring, chain_for_key, group_of_key
from .store import StoreFull

SYNC_ROUND_CAP = 64


class ControlError(Exception):
    pass


class UnknownSwitch(ControlError):
    pass


class NoEligibleSwitch(ControlError):
    pass


class RecoveryStuck(ControlError):
    pass


class Topology:
    """Physical adjacency over every node (switches, controller, clients).

    Adjacency must be symmetric.  `next_hop` gives deterministic
    shortest-path underlay routing (BFS, ties broken by address order).
    """

    def __init__(self, adjacency: dict[str, set[str]], switches: set[str]):
        self.adj = {node: frozenset(peers) for node, peers in adjacency.items()}
        self.switches = frozenset(switches)
        for node, peers in self.adj.items():
            for p in peers:
                if node not in self.adj.get(p, frozenset()):
                    raise ControlError(f"asymmetric adjacency: {node} -> {p}")
        self._routes: dict[str, dict[str, str]] = {}

    def neighbors(self, node: str, switches_only: bool = True) -> frozenset[str]:
        if node not in self.adj:
            raise UnknownSwitch(node)
        peers = self.adj[node]
        if switches_only:
            peers = frozenset(p for p in peers if p in self.switches)
        return peers

    def next_hop(self, src: str, dst: str) -> Optional[str]:
        """First hop on the shortest path src -> dst, or None if unreachable."""
        table = self._routes.get(dst)
        if table is None:
            table = self._build_routes(dst)
            self._routes[dst] = table
        return table.get(src)

    def _build_routes(self, dst: str) -> dict[str, str]:
        # BFS from dst; table[src] = src's neighbor one step closer to dst.
        table: dict[str, str] = {}
        dist = {dst: 0}
        q = deque([dst])
        while q:
            cur = q.popleft()
            for nb in sorted(self.adj.get(cur, ())):
                if nb not in dist:
                    dist[nb] = dist[cur] + 1
                    table[nb] = cur
                    q.append(nb)
        return table


class Phase(enum.Enum):
    PRESYNC = "presync"
    STOPPED = "stopped"
    ACTIVATED = "activated"


@dataclass
class RecoveryPlan:
    failed: str
    replacement: str
    ref: Optional[str] = None  # reference switch for the current group
    phase: Phase = Phase.PRESYNC
    group_cursor: int = 0
    groups_done: set[int] = field(default_factory=set)
    session_bumped: bool = False
    aborted: bool = False


@dataclass
class RecoveryStep:
    """One controller action, applied via Controller._apply_step."""

    kind: str  # presync | stop | sync | activate | finish
    group: int
    plan: RecoveryPlan


class Controller:
    """Single serial decision loop.  Switch mutations are issued through an
    admin bus: `bus(ip)` returns the admin handle for one switch."""

    def __init__(
        self,
        ring: Ring,
        topology: Topology,
        bus,
        controller_ip: str = "10.0.255.1",
        standby: Optional[list[str]] = None,
        chain_order_override: Optional[list[str]] = None,
        mutations: Optional[Mutations] = None,
    ):
        self.ring = ring
        self.topology = topology
        self.bus = bus
        self.ip = controller_ip
        self.chain_order_override = chain_order_override
        self.mutations = mutations or Mutations()
        # Standby switches serve no chains until recovery assigns them
        # a failed switch's virtual nodes.
        self.statuses: dict[str, SwitchStatus] = {
            sw: SwitchStatus.ALIVE for sw in list(ring.switches) + list(standby or [])
        }
        self.replacements: dict[str, str] = {}
        self.activated_groups: dict[str, set[int]] = {}
        self.keys: set[bytes] = set()
        self.session_counter = 0
        self.rule_installs: list[tuple[str, FailoverRule]] = []
        # Bumped on every chain-affecting change; lets callers cache
        # effective chains between reconfigurations.
        self.epoch = 0

    # ------------------------------------------------------------------ chains

    def base_chain(self, key: bytes) -> tuple[str, ...]:
        chain = chain_for_key(self.ring, key)
        if self.chain_order_override:
            order = {ip: i for i, ip in enumerate(self.chain_order_override)}
            chain = tuple(sorted(chain, key=lambda ip: order.get(ip, len(order))))
        return chain

    def effective_chain(self, key: bytes) -> tuple[str, ...]:
        """Chain as currently served: failed members are replaced by their
        activated replacement for this key's group, or dropped entirely."""
        out = []
        gid = group_of_key(self.ring, key)
        for sw in self.base_chain(key):
            status = self.statuses.get(sw, SwitchStatus.ALIVE)
            if status == SwitchStatus.ALIVE:
                out.append(sw)
            elif gid in self.activated_groups.get(sw, ()):
                out.append(self.replacements[sw])
        return tuple(out)

    def group_of(self, key: bytes) -> int:
        return group_of_key(self.ring, key)

    def live_switches(self) -> list[str]:
        return [
            sw for sw, st in self.statuses.items() if st == SwitchStatus.ALIVE
        ]

    # ----------------------------------------------------------------- failover

    def mark_failed(self, ip: str) -> None:
        if ip not in self.statuses:
            raise UnknownSwitch(ip)
        self.statuses[ip] = SwitchStatus.FAILED
        self.epoch += 1
        admin = self.bus(ip)
        if admin is not None:
            admin.set_status(SwitchStatus.FAILED)

    def failover(self, failed: str) -> list[tuple[str, FailoverRule]]:
        """Install a bypass rule on each physical neighbor of the failed
        switch.  Idempotent: re-installing an identical rule is a no-op at
        the switch, and the returned list names each (neighbor, rule) pair."""
        if failed not in self.statuses:
            raise UnknownSwitch(failed)
        installs = []
        rule = FailoverRule(match_dst=failed, mode=RuleMode.BYPASS, priority=0)
        for nb in sorted(self.topology.neighbors(failed)):
            self.bus(nb).install_rule(rule)
            installs.append((nb, rule))
        self.rule_installs.extend(installs)
        return installs

    # ----------------------------------------------------------------- recovery

    def assign_replacements(self, failed: str, rng) -> dict[int, str]:
        """Map each of the failed switch's virtual nodes to a live switch
        that is not already in any chain the virtual node serves."""
        vnodes = self.ring.vnodes_of(failed)
        live = [
            sw
            for sw, st in self.statuses.items()
            if sw != failed and st == SwitchStatus.ALIVE
        ]
        assignment = {}
        for vid in vnodes:
            barred = set()
            # The virtual node serves its own segment and the f preceding
            # ones (their chains walk forward through it).
            for back in range(self.ring.chain_len):
                seg = (vid - back) % self.ring.m
                barred.update(self.ring.chain_for_segment(seg))
            eligible = sorted(sw for sw in live if sw not in barred)
            if not eligible:
                raise NoEligibleSwitch(f"no live switch outside vnode {vid}'s chains")
            assignment[vid] = eligible[rng.randrange(len(eligible))]
        return assignment

    def plan_recovery(self, failed: str, new_sw: str) -> RecoveryPlan:
        if failed not in self.statuses:
            raise UnknownSwitch(failed)
        if self.statuses.get(new_sw) != SwitchStatus.ALIVE:
            raise ControlError(f"replacement {new_sw} is not alive")
        # The replacement must sit outside every affected chain, or the
        # distinct-switch walk would reshape chain membership under it.
        for key in sorted(self.keys):
            chain = self.base_chain(key)
            if failed in chain and new_sw in chain:
                raise NoEligibleSwitch(
                    f"{new_sw} already serves a chain of failed switch {failed}"
                )
        return RecoveryPlan(failed=failed, replacement=new_sw)

    def recovery_steps(self, plan: RecoveryPlan) -> Iterator[RecoveryStep]:
        """Yield the staged recovery actions, one virtual group at a time.
        The caller applies each step via apply_step(); the data plane keeps
        serving between steps."""
        for gid in range(self.ring.groups):
            plan.group_cursor = gid
            yield RecoveryStep("presync", gid, plan)
            yield RecoveryStep("stop", gid, plan)
            yield RecoveryStep("sync", gid, plan)
            yield RecoveryStep("activate", gid, plan)
        yield RecoveryStep("finish", self.ring.groups, plan)

    def apply_step(self, step: RecoveryStep) -> bool:
        """Apply one step.  Returns False when the step must run again later
        (sync not yet stable because in-flight traffic is still draining)."""
        plan = step.plan
        if plan.aborted:
            return True
        if self.statuses.get(plan.replacement) != SwitchStatus.ALIVE:
            self.abort_recovery(plan)
            return True
        handler = getattr(self, f"_step_{step.kind}")
        return handler(plan, step.group) is not False

    def run_recovery(self, failed: str, new_sw: str) -> RecoveryPlan:
        """Execute a whole recovery synchronously (no traffic interleaved)."""
        plan = self.plan_recovery(failed, new_sw)
        for step in self.recovery_steps(plan):
            for _ in range(SYNC_ROUND_CAP):
                if self.apply_step(step):
                    break
            else:
                raise RecoveryStuck(f"step {step.kind} group {step.group}")
        return plan

    def abort_recovery(self, plan: RecoveryPlan) -> None:
        """Replacement died mid-recovery: drop back to failover-only mode."""
        plan.aborted = True
        for nb in sorted(self.topology.neighbors(plan.failed)):
            admin = self.bus(nb)
            admin.clear_stop(plan.failed)
            admin.remove_rule(plan.failed)
            admin.install_rule(
                FailoverRule(match_dst=plan.failed, mode=RuleMode.BYPASS, priority=0)
            )
        self.activated_groups.pop(plan.failed, None)
        self.replacements.pop(plan.failed, None)
        self.epoch += 1

    # Per-key reference switch: next live hop, or previous live hop when the
    # failed switch is the chain tail.
    def _ref_for(self, chain: tuple[str, ...], failed: str) -> str:
        idx = chain.index(failed)
        for sw in chain[idx + 1 :]:
            if self.statuses.get(sw) == SwitchStatus.ALIVE:
                return sw
        for sw in reversed(chain[:idx]):
            if self.statuses.get(sw) == SwitchStatus.ALIVE:
                return sw
        raise ControlError(f"no live reference in chain {chain}")

    def _group_keys(self, plan: RecoveryPlan, gid: int) -> dict[str, list[bytes]]:
        """Affected keys of this group, bucketed by reference switch."""
        by_ref: dict[str, list[bytes]] = {}
        for key in sorted(self.keys):
            if self.group_of(key) != gid:
                continue
            chain = self.base_chain(key)
            if plan.failed not in chain:
                continue
            by_ref.setdefault(self._ref_for(chain, plan.failed), []).append(key)
        return by_ref

    def _copy_group(self, plan: RecoveryPlan, gid: int) -> None:
        new_admin = self.bus(plan.replacement)
        for ref, keys in sorted(self._group_keys(plan, gid).items()):
            image = self.bus(ref).snapshot(keys)
            new_admin.apply_entries(image)

    def _group_synced(self, plan: RecoveryPlan, gid: int) -> bool:
        new_admin = self.bus(plan.replacement)
        for ref, keys in sorted(self._group_keys(plan, gid).items()):
            ref_image = self.bus(ref).snapshot(keys)
            new_image = new_admin.snapshot(keys)
            new_by_key = {e.key: e for e in new_image.entries}
            for e in ref_image.entries:
                got = new_by_key.get(e.key)
                if got is None or (got.session, got.seq, got.value, got.valid) != (
                    e.session,
                    e.seq,
                    e.value,
                    e.valid,
                ):
                    return False
        return True

    def _step_presync(self, plan: RecoveryPlan, gid: int) -> None:
        plan.phase = Phase.PRESYNC
        refs = sorted(self._group_keys(plan, gid))
        plan.ref = refs[0] if refs else None
        self._copy_group(plan, gid)

    def _step_stop(self, plan: RecoveryPlan, gid: int) -> None:
        plan.phase = Phase.STOPPED
        stop = StopRule(groups=frozenset([gid]), hold_reads=True)
        for nb in sorted(self.topology.neighbors(plan.failed)):
            self.bus(nb).set_stop(plan.failed, stop)

    def _step_sync(self, plan: RecoveryPlan, gid: int) -> bool:
        if self.mutations.activate_before_sync:
            return True
        self._copy_group(plan, gid)
        return self._group_synced(plan, gid)

    def _step_activate(self, plan: RecoveryPlan, gid: int) -> None:
        plan.phase = Phase.ACTIVATED
        done = self.activated_groups.setdefault(plan.failed, set())
        if (
            not plan.session_bumped
            and self._group_has_headed_key(plan, gid)
            and not self.mutations.skip_session_bump
        ):
            self.session_counter += 1
            self.bus(plan.replacement).bump_session(self.session_counter)
            plan.session_bumped = True
        done.add(gid)
        self.epoch += 1
        rule = FailoverRule(
            match_dst=plan.failed,
            mode=RuleMode.REDIRECT,
            priority=1,
            target=plan.replacement,
            groups=frozenset(done),
        )
        self.replacements[plan.failed] = plan.replacement
        for nb in sorted(self.topology.neighbors(plan.failed)):
            admin = self.bus(nb)
            admin.install_rule(rule)
            admin.clear_stop(plan.failed)

    def _group_has_headed_key(self, plan: RecoveryPlan, gid: int) -> bool:
        for key in self.keys:
            if self.group_of(key) != gid:
                continue
            chain = self.base_chain(key)
            if chain and chain[0] == plan.failed:
                return True
        return False

    def _step_finish(self, plan: RecoveryPlan, _gid: int) -> None:
        self.statuses[plan.failed] = SwitchStatus.RECOVERED
        admin = self.bus(plan.failed)
        if admin is not None:
            admin.set_status(
                SwitchStatus.RECOVERED,
                write_fwd=plan.replacement,
                read_fwd=plan.replacement,
            )
        # All groups switched over: neighbors no longer need group filters.
        rule = FailoverRule(
            match_dst=plan.failed,
            mode=RuleMode.REDIRECT,
            priority=1,
            target=plan.replacement,
        )
        for nb in sorted(self.topology.neighbors(plan.failed)):
            self.bus(nb).install_rule(rule)
        reassignment = {
            vid: plan.replacement for vid in self.ring.vnodes_of(plan.failed)
        }
        self.ring = self.ring.with_owners(reassignment)
        self.epoch += 1
        # Backends whose switches hold a local ring view (the UDP runtime)
        # learn the new ownership here; the simulator's admin ignores this.
        for sw, status in sorted(self.statuses.items()):
            if status != SwitchStatus.ALIVE:
                continue
            push = getattr(self.bus(sw), "set_owners", None)
            if push is not None:
                push(self.ring.owners)

    # ------------------------------------------------------------ insert/delete

    def admin_insert(self, key: bytes, value: bytes) -> None:
        """Install an index entry and initial value on every chain member,
        tail first, so a reader never finds an upstream entry without a
        downstream one.  Rolls back on StoreFull."""
        chain = self.effective_chain(key)
        if not chain:
            raise ControlError("no live chain for key")
        installed = []
        try:
            for sw in reversed(chain):
                self.bus(sw).insert(key, value)
                installed.append(sw)
        except StoreFull:
            for sw in installed:
                self.bus(sw).gc(key)
            raise
        self.keys.add(key)

    def admin_delete(self, key: bytes) -> None:
        chain = self.effective_chain(key)
        for sw in chain:
            self.bus(sw).tombstone(key)
        for sw in chain:
            self.bus(sw).gc(key)
        self.keys.discard(key)

    # ----------------------------------------------------------------- commands

    def handle_command(self, line: str) -> str:
        """Line-oriented command interface shared by the CLI and the TCP
        admin port: returns 'OK[ detail]' or 'ERR <msg>'."""
        try:
            parts = line.strip().split()
            if not parts:
                return "ERR empty command"
            cmd, args = parts[0], parts[1:]
            if cmd == "mark-failed":
                self.mark_failed(args[0])
                return "OK"
            if cmd == "failover":
                installs = self.failover(args[0])
                return f"OK {len(installs)} rules"
            if cmd == "recover":
                plan = self.run_recovery(args[0], args[1])
                return "ERR aborted" if plan.aborted else "OK"
            if cmd == "insert":
                self.admin_insert(
                    bytes.fromhex(args[0]), bytes.fromhex(args[1]) if len(args) > 1 else b""
                )
                return "OK"
            if cmd == "delete":
                self.admin_delete(bytes.fromhex(args[0]))
                return "OK"
            if cmd == "status":
                body = ",".join(
                    f"{sw}={st.value}" for sw, st in sorted(self.statuses.items())
                )
                return f"OK {body}"
            if cmd == "ring":
                return "OK " + ring_state_dumps(self.ring)
            return f"ERR unknown command {cmd}"
        except Exception as exc:  # command surface: report, never crash
            return f"ERR {exc}"


def ring_state_dumps(ring: Ring) -> str:
    import json

    return json.dumps(
        {
            "switches": list(ring.switches),
            "m": ring.m,
            "f": ring.f,
            "groups": ring.groups,
            "seed": ring.seed,
            "owners": list(ring.owners),
        },
        sort_keys=True,
        separators=(",", ":"),
    )


def ring_state_loads(text: str) -> Ring:
    import json

    from .placement import build_ring

    doc = json.loads(text)
    ring = build_ring(
        doc["switches"], doc["m"], doc["f"], doc["groups"], doc["seed"]
    )
    return ring.with_owners(dict(enumerate(doc["owners"])))
