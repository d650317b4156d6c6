"""Deterministic discrete-event network: switches, controller, and client
agents exchanging packets over lossy links, with fault injection and safety
checkers run as the simulation advances.

Packets travel the physical topology one link at a time; a switch on the
path either consumes the packet (it is the destination), applies a matching
failover rule (neighbor interception), or forwards it toward the
destination.  Link loss, duplication, and reordering are drawn from a single
seeded RNG, so identical (scenario, seed) pairs replay byte-identically.

After every delivery that can move a key's version, the update-propagation
invariant is re-checked for that key; client-observed consistency is checked
on every completion.  Violations are collected in the RunReport (the run
aborts after too many).
"""

from __future__ import annotations

import heapq
import json
import random
from dataclasses import dataclass, field
from typing import Callable, Optional

from .. import dataplane
from ..client import Agent, AgentConfig, HistoryEvent, TwoPhaseLocking, build_request
from ..control import Controller, Topology
from ..dataplane import Mutations, SwitchState, SwitchStatus
from ..placement import build_ring
from ..store import KVStore, NotFound
from ..wire import OpCode, Packet, ip_to_u32, u32_to_ip
from .checkers import check_consistency
from .scenario import ScenarioConfig

CONTROLLER_IP = "10.0.255.1"
VIOLATION_CAP = 20


class InvariantViolation(Exception):
    def __init__(self, message: str, trace_tail: list):
        super().__init__(message)
        self.trace_tail = trace_tail


@dataclass
class RunReport:
    scenario: dict
    seed: int
    end_time_us: int = 0
    counters: dict[str, int] = field(default_factory=dict)
    latencies_us: dict[str, list[int]] = field(default_factory=dict)
    violations: list[str] = field(default_factory=list)
    history: list[HistoryEvent] = field(default_factory=list)
    final_versions: dict[str, dict[str, list[int]]] = field(default_factory=dict)
    committed_txns: dict[int, int] = field(default_factory=dict)

    def completed(self) -> int:
        return self.counters.get("completes", 0)

    def percentile(self, op: str, q: float) -> int:
        lats = sorted(self.latencies_us.get(op, []))
        if not lats:
            return 0
        idx = min(len(lats) - 1, int(q * len(lats)))
        return lats[idx]

    def qps(self) -> float:
        if self.end_time_us == 0:
            return 0.0
        return self.completed() / (self.end_time_us / 1e6)

    def to_bytes(self) -> bytes:
        doc = {
            "scenario": self.scenario,
            "seed": self.seed,
            "end_time_us": self.end_time_us,
            "counters": self.counters,
            "latencies_us": self.latencies_us,
            "violations": self.violations,
            "history": [
                [
                    e.client_id,
                    e.req_id,
                    e.kind,
                    e.op,
                    e.key.hex(),
                    e.value.hex(),
                    e.session,
                    e.seq,
                    e.ts,
                    e.status,
                ]
                for e in self.history
            ],
            "final_versions": self.final_versions,
            "committed_txns": self.committed_txns,
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()

    def metrics_rows(self) -> list[dict]:
        rows = []
        for op in sorted(self.latencies_us):
            rows.append(
                {
                    "op": op,
                    "count": len(self.latencies_us[op]),
                    "p50_us": self.percentile(op, 0.50),
                    "p99_us": self.percentile(op, 0.99),
                }
            )
        return rows


class _DirectAdmin:
    """Controller admin handle bound to an in-simulator switch."""

    def __init__(self, sim: "Simulation", state: SwitchState):
        self.sim = sim
        self.state = state
        self.ip = state.ip

    def install_rule(self, rule):
        dataplane.install_rule(self.state, rule)

    def remove_rule(self, dst):
        dataplane.remove_rule(self.state, dst)

    def set_stop(self, dst, stop):
        dataplane.set_stop(self.state, dst, stop)

    def clear_stop(self, dst):
        released = dataplane.clear_stop(self.state, dst)
        for pkt in released:
            emits = dataplane.intercept(self.state, pkt, dst)
            self.sim._emit_all(self.ip, emits)

    def set_status(self, status, write_fwd=None, read_fwd=None):
        dataplane.set_status(self.state, status, write_fwd, read_fwd)

    def bump_session(self, session):
        dataplane.bump_session(self.state, session)

    def snapshot(self, keys=None):
        return self.state.store.snapshot(keys)

    def apply_entries(self, image):
        return self.state.store.apply_entries(image)

    def insert(self, key, value):
        self.state.store.insert_index(key, value)

    def tombstone(self, key):
        self.state.store.tombstone(self.state.store.lookup(key))

    def gc(self, key):
        self.state.store.gc(key)


class _ClientTask:
    """One closed-loop client: issues the next workload op when the
    previous one completes or times out.  Chain knowledge is cached and
    refreshed lazily when an op is retried."""

    def __init__(self, sim: "Simulation", ip: str, attach: str):
        self.sim = sim
        self.ip = ip
        self.attach = attach
        self._chains: dict[bytes, tuple[str, ...]] = {}
        self.agent = Agent(
            ring_provider=None,
            config=AgentConfig(
                client_ip=ip,
                timeout_us=sim.scenario.timeout_us,
                max_retries=sim.scenario.max_retries,
            ),
            chain_provider=self._chain,
        )
        self.pending_key: Optional[bytes] = None
        self.invoke_ts = 0
        self.txn: Optional[TwoPhaseLocking] = None

    def _chain(self, key: bytes) -> tuple[str, ...]:
        chain = self._chains.get(key)
        if chain is None:
            chain = self.sim.controller.effective_chain(key)
            self._chains[key] = chain
        return chain

    def refresh(self, key: bytes) -> None:
        self._chains.pop(key, None)

    def start_op(self, begin_fn, key: bytes, *args) -> None:
        now = self.sim.now
        self.pending_key = key
        self.invoke_ts = now
        emits = begin_fn(key, *args, now)
        self.sim._send_all(self.ip, emits)
        self.sim._arm_timer(self)

    def on_result(self, result) -> None:
        if result.status != "timeout":
            self.sim._record_latency(result.op, self.sim.now - self.invoke_ts)
        self.sim._count("completes" if result.status != "timeout" else "timeouts")
        self.pending_key = None
        self.sim._next_op(self, result)



class Simulation:
    def __init__(
        self,
        scenario: ScenarioConfig,
        seed: int,
        mutations: Optional[Mutations] = None,
        delay_fn: Optional[Callable] = None,
        store_capacity: int = 65536,
    ):
        scenario.validate()
        self.scenario = scenario
        self.seed = seed
        self.rng = random.Random(seed)
        self.mutations = mutations or Mutations()
        self.delay_fn = delay_fn
        self.now = 0
        self._heap: list = []
        self._seq = 0
        self.report = RunReport(scenario=json.loads(scenario.dumps()), seed=seed)

        sws = scenario.switches
        self.ring = build_ring(
            scenario.ring_switches(),
            scenario.m,
            scenario.f,
            scenario.groups,
            scenario.ring_seed,
        )
        self.client_ips = [u32_to_ip(ip_to_u32("10.1.0.1") + i) for i in range(scenario.clients)]
        self.topology = self._build_topology()

        self.switches: dict[str, SwitchState] = {}
        for ip in sws:
            st = SwitchState(
                ip=ip,
                store=KVStore(store_capacity),
                controller_ip=CONTROLLER_IP,
                mutations=self.mutations,
            )
            self.switches[ip] = st
        self.controller = Controller(
            self.ring,
            self.topology,
            bus=self._admin,
            controller_ip=CONTROLLER_IP,
            standby=scenario.standby,
            chain_order_override=scenario.pin_chain_order,
            mutations=self.mutations,
        )
        for st in self.switches.values():
            st.group_of = self.controller.group_of

        self._admins = {ip: _DirectAdmin(self, st) for ip, st in self.switches.items()}
        self._chain_cache: dict[bytes, tuple[str, ...]] = {}
        self._chain_epoch = -1
        self._routes: dict[str, dict[str, Optional[str]]] = {}
        self._routes_epoch = -1

        self.keys: list[bytes] = []
        self.tasks: list[_ClientTask] = []
        attach = scenario.client_attach or sws
        for i, ip in enumerate(self.client_ips):
            self.tasks.append(_ClientTask(self, ip, attach[i % len(attach)]))
        self._task_by_ip = {t.ip: t for t in self.tasks}
        self._ops_left = scenario.ops
        self._open_loop_issued = 0
        self._stop_probe: Optional[dict] = None

    # --------------------------------------------------------------- plumbing

    def _admin(self, ip: str):
        return self._admins.get(ip)

    def _build_topology(self) -> Topology:
        sws = self.scenario.switches
        adj: dict[str, set[str]] = {ip: set() for ip in sws}
        if self.scenario.adjacency is not None:
            for a, peers in self.scenario.adjacency.items():
                for b in peers:
                    adj.setdefault(a, set()).add(b)
                    adj.setdefault(b, set()).add(a)
        else:
            for a in sws:
                for b in sws:
                    if a != b:
                        adj[a].add(b)
        # Controller reaches every switch; clients attach per scenario.
        adj[CONTROLLER_IP] = set(sws)
        for ip in sws:
            adj[ip].add(CONTROLLER_IP)
        attach = self.scenario.client_attach or sws
        for i, cip in enumerate(self.client_ips):
            at = attach[i % len(attach)]
            adj.setdefault(cip, set()).add(at)
            adj[at].add(cip)
        return Topology(adj, set(sws))

    def schedule(self, delay_us: int, fn: Callable[[], None]) -> None:
        self._seq += 1
        heapq.heappush(self._heap, (self.now + delay_us, self._seq, fn))

    def _count(self, name: str, n: int = 1) -> None:
        self.report.counters[name] = self.report.counters.get(name, 0) + n

    def _record_latency(self, op: str, us: int) -> None:
        self.report.latencies_us.setdefault(op, []).append(us)

    # ---------------------------------------------------------------- routing

    def _route(self, cur: str, dst: str) -> Optional[str]:
        if self._routes_epoch != self.controller.epoch:
            self._routes = {}
            self._routes_epoch = self.controller.epoch
        table = self._routes.get(dst)
        if table is None:
            table = self._route_table(dst)
            self._routes[dst] = table
        return table.get(cur)

    def _route_table(self, dst: str) -> dict[str, Optional[str]]:
        # BFS from dst over links whose transit nodes are alive; the dst
        # itself may be dead (packets must still reach its neighbors, where
        # failover rules intercept them).
        from collections import deque

        def alive(node: str) -> bool:
            st = self.switches.get(node)
            return st is None or st.status == SwitchStatus.ALIVE

        table: dict[str, Optional[str]] = {}
        q = deque([dst])
        seen = {dst}
        while q:
            cur = q.popleft()
            # Clients and the controller are endpoints, never transit hops.
            if cur != dst and cur not in self.topology.switches:
                continue
            for nb in sorted(self.topology.adj.get(cur, ())):
                if nb in seen or not alive(nb):
                    continue
                seen.add(nb)
                table[nb] = cur
                q.append(nb)
        return table

    # --------------------------------------------------------------- transport

    def _send_all(self, src: str, emits) -> None:
        for dst, pkt in emits:
            self.send(src, dst, pkt)

    def _emit_all(self, src: str, emits) -> None:
        self._send_all(src, emits)

    def send(self, cur: str, dst: str, pkt: Packet) -> None:
        if cur == dst:
            self.schedule(0, lambda: self._arrive(cur, dst, pkt))
            return
        hop = self._route(cur, dst)
        if hop is None:
            self._count("unroutable")
            return
        rng = self.rng
        if rng.random() < self.scenario.loss:
            self._count("link_loss")
            return
        delay = self.scenario.delay_us
        if self.scenario.jitter_us:
            delay += rng.randrange(self.scenario.jitter_us + 1)
        if rng.random() < self.scenario.reorder:
            delay += self.scenario.reorder_extra_us
            self._count("link_reorder")
        if self.delay_fn is not None:
            delay = self.delay_fn(cur, hop, pkt, delay)
        copies = 1
        if rng.random() < self.scenario.dup:
            copies = 2
            self._count("link_dup")
        for c in range(copies):
            self.schedule(delay + c, lambda: self._arrive(hop, dst, pkt))

    def _arrive(self, node: str, dst: str, pkt: Packet) -> None:
        st = self.switches.get(node)
        if st is not None:
            if st.status != SwitchStatus.ALIVE:
                self._count("dead_drop")
                return
            if node == dst:
                self._deliver_switch(st, pkt)
            elif dst in st.rules:
                emits = dataplane.intercept(st, pkt, dst)
                self._send_all(node, emits)
            else:
                self.send(node, dst, pkt)
            return
        if node != dst:
            self._count("client_misroute")
            return
        if node == CONTROLLER_IP:
            self._controller_mailbox(pkt)
            return
        self._deliver_client(node, pkt)

    # --------------------------------------------------------------- delivery

    def effective_chain(self, key: bytes) -> tuple[str, ...]:
        if self._chain_epoch != self.controller.epoch:
            self._chain_cache = {}
            self._chain_epoch = self.controller.epoch
        chain = self._chain_cache.get(key)
        if chain is None:
            chain = self.controller.effective_chain(key)
            self._chain_cache[key] = chain
        return chain

    def _deliver_switch(self, st: SwitchState, pkt: Packet) -> None:
        chain = self.effective_chain(pkt.key)
        is_head = bool(chain) and chain[0] == st.ip
        is_tail = bool(chain) and chain[-1] == st.ip
        emits = dataplane.process(st, pkt, is_head, is_tail)
        self._send_all(st.ip, emits)
        if pkt.op in (OpCode.WRITE, OpCode.CAS):
            self._check_key(pkt.key)

    def _deliver_client(self, ip: str, pkt: Packet) -> None:
        task = self._task_by_ip.get(ip)
        if task is None:
            self._count("client_misroute")
            return
        result = task.agent.on_reply(pkt, self.now)
        if result is not None:
            task.on_result(result)

    def _controller_mailbox(self, pkt: Packet) -> None:
        from ..wire import FLAG_NOT_FOUND

        ctrl = self.controller
        flags = 0
        if pkt.op == OpCode.INSERT:
            if pkt.key not in ctrl.keys:
                ctrl.admin_insert(pkt.key, pkt.value)
        elif pkt.op == OpCode.DELETE:
            if pkt.key in ctrl.keys:
                ctrl.admin_delete(pkt.key)
            else:
                flags = FLAG_NOT_FOUND
        else:
            self._count("controller_unexpected_op")
            return
        reply = Packet(
            op=OpCode.REPLY,
            key=pkt.key,
            client_id=pkt.client_id,
            req_id=pkt.req_id,
            value=b"",
            flags=flags,
        )
        self.send(CONTROLLER_IP, u32_to_ip(pkt.client_id), reply)

    # --------------------------------------------------------------- checking

    def _versions_for_key(self, key: bytes) -> dict[str, tuple[int, int]]:
        out = {}
        for ip, st in self.switches.items():
            try:
                loc = st.store.lookup(key)
            except NotFound:
                continue
            out[ip] = st.store.version(loc)
        return out

    def _check_key(self, key: bytes) -> None:
        ctrl = self.controller
        gid = ctrl.group_of(key)
        resolved = []
        for sw in ctrl.base_chain(key):
            status = ctrl.statuses.get(sw, SwitchStatus.ALIVE)
            if status == SwitchStatus.ALIVE:
                resolved.append(sw)
            elif gid in ctrl.activated_groups.get(sw, ()):
                resolved.append(ctrl.replacements[sw])
        prev_ip = None
        prev_ver = None
        for sw in resolved:
            st = self.switches[sw]
            try:
                loc = st.store.lookup(key)
                ver = st.store.version(loc)
            except NotFound:
                ver = (0, 0)
            if prev_ver is not None and ver > prev_ver:
                self._violate(
                    f"update-propagation: key {key.hex()} upstream {prev_ip}={prev_ver}"
                    f" < downstream {sw}={ver} at t={self.now}"
                )
                return
            prev_ip, prev_ver = sw, ver

    def check_all_keys(self) -> None:
        for key in self.keys:
            self._check_key(key)

    def _group_keys(self, gid: int) -> list[bytes]:
        cache = getattr(self, "_group_key_cache", None)
        if cache is None:
            cache = {}
            for key in self.keys:
                cache.setdefault(self.controller.group_of(key), []).append(key)
            self._group_key_cache = cache
        return cache.get(gid, [])

    def switch_counter_total(self, name: str) -> int:
        return sum(st.counters.get(name, 0) for st in self.switches.values())

    def _violate(self, message: str) -> None:
        self.report.violations.append(message)
        if len(self.report.violations) >= VIOLATION_CAP:
            raise InvariantViolation(message, [])

    # --------------------------------------------------------------- workload

    def setup_keys(self, keys: Optional[list[bytes]] = None) -> None:
        if keys is None:
            keys = [f"key-{i:04d}".encode().ljust(16, b"\x00") for i in range(self.scenario.key_count)]
        for key in keys:
            value = b"\x00" * max(1, min(self.scenario.value_size, 8))
            self.controller.admin_insert(key, value)
        self.keys = keys

    def _next_op(self, task: _ClientTask, result) -> None:
        if task.txn is not None:
            self._next_lock_op(task, result)
            return
        if self._ops_left <= 0:
            return
        self._ops_left -= 1
        key = self.keys[self.rng.randrange(len(self.keys))]
        if self.rng.random() < self.scenario.write_ratio:
            value = self.rng.randbytes(self.scenario.value_size)
            task.start_op(task.agent.begin_write, key, value)
        else:
            task.start_op(task.agent.begin_read, key)

    def _next_lock_op(self, task: _ClientTask, result) -> None:
        wl = task.txn
        if result is not None:
            if result.status == "timeout":
                # Outcome unknown: abort the transaction conservatively.
                wl.feed(False)
            else:
                wl.feed(result.ok)
        op = wl.next_op()
        if op is None:
            return
        kind, key = op
        if kind == "acquire":
            task.start_op(task.agent.begin_lock_acquire, key)
        else:
            task.start_op(task.agent.begin_lock_release, key)

    def _arm_timer(self, task: _ClientTask) -> None:
        deadline = task.agent.next_deadline()
        if deadline is None:
            return
        req = task.agent.pending_req()
        self.schedule(deadline - self.now, lambda: self._timer_fire(task, deadline, req))

    def _timer_fire(self, task: _ClientTask, deadline: int, req: int) -> None:
        if task.agent.next_deadline() != deadline or task.agent.pending_req() != req:
            return  # completed or already retried
        if task.pending_key is not None:
            task.refresh(task.pending_key)  # lazy chain-map refresh on timeout
        emits, timed_out = task.agent.on_tick(self.now)
        if timed_out is not None:
            task.on_result(timed_out)
            return
        if emits:
            self._count("retries")
            self._send_all(task.ip, emits)
        self._arm_timer(task)

    # ----------------------------------------------------------------- faults

    def _schedule_faults(self) -> None:
        for ev in self.scenario.faults:
            if ev.kind == "fail":
                self.schedule(ev.t_us, lambda ip=ev.ip: self._fault_fail(ip))
            elif ev.kind == "failover":
                self.schedule(ev.t_us, lambda ip=ev.ip: self.controller.failover(ip))
            elif ev.kind == "recover":
                self.schedule(
                    ev.t_us,
                    lambda ip=ev.ip, new=ev.new_ip: self._fault_recover(ip, new),
                )

    def _fault_fail(self, ip: str) -> None:
        self.controller.mark_failed(ip)

    def _fault_recover(self, failed: str, new_sw: str) -> None:
        plan = self.controller.plan_recovery(failed, new_sw)
        steps = self.controller.recovery_steps(plan)
        self._recovery_pump(plan, steps, None, 0)

    def _recovery_pump(self, plan, steps, current, attempts) -> None:
        if current is None:
            current = next(steps, None)
            attempts = 0
            if current is None:
                return
        done = self.controller.apply_step(current)
        if current.kind == "finish":
            self.check_all_keys()
        else:
            for key in self._group_keys(current.group):
                self._check_key(key)
        self._on_controller_step(current, done)
        if done:
            dwell = self.scenario.recovery_step_us
            if current.kind == "stop" and self.scenario.stop_dwell_us:
                dwell += self.scenario.stop_dwell_us
            self.schedule(dwell, lambda: self._recovery_pump(plan, steps, None, 0))
        else:
            if attempts + 1 >= 64:
                self._violate(f"recovery step {current.kind} stuck")
                return
            self.schedule(
                self.scenario.recovery_step_us,
                lambda: self._recovery_pump(plan, steps, current, attempts + 1),
            )

    def _on_controller_step(self, step, done: bool) -> None:
        pass  # test hook

    # -------------------------------------------------------------------- run

    def run(self) -> RunReport:
        if not self.keys:
            self.setup_keys()
        self._schedule_faults()
        if self.scenario.open_loop:
            self._start_open_loop()
        else:
            for task in self.tasks:
                self._next_op(task, None)
        try:
            while self._heap:
                self.now, _, fn = heapq.heappop(self._heap)
                fn()
        except InvariantViolation:
            pass
        self.report.end_time_us = self.now
        self._finalize()
        return self.report

    def _start_open_loop(self) -> None:
        interval = self.scenario.open_loop_interval_us
        total = self.scenario.ops

        def issue(i: int) -> None:
            if i >= total:
                return
            task = self.tasks[i % len(self.tasks)]
            key = self.keys[self.rng.randrange(len(self.keys))]
            if self.rng.random() < self.scenario.write_ratio:
                op = OpCode.WRITE
                value = self.rng.randbytes(self.scenario.value_size)
            else:
                op = OpCode.READ
                value = b""
            chain = self.effective_chain(key)
            if chain:
                req_id = self._open_loop_issued + 1
                self._open_loop_issued += 1
                dst, pkt = build_request(
                    op, key, value, ip_to_u32(task.ip), req_id, chain
                )
                self.send(task.ip, dst, pkt)
                self._count("open_loop_issued")
            self.schedule(interval, lambda: issue(i + 1))

        issue(0)

    def _finalize(self) -> None:
        merged = []
        for task in self.tasks:
            merged.extend(task.agent.history)
        merged.sort(key=lambda e: (e.ts, e.client_id, e.req_id, e.kind == "complete"))
        self.report.history = merged
        for task in self.tasks:
            cv = check_consistency(task.agent.history)
            if cv is not None:
                self.report.violations.append(f"consistency: {cv}")
                break
        for key in self.keys:
            self.report.final_versions[key.hex()] = {
                ip: list(ver) for ip, ver in self._versions_for_key(key).items()
            }
        for i, task in enumerate(self.tasks):
            if task.txn is not None:
                self.report.committed_txns[i] = task.txn.committed

def run(scenario: ScenarioConfig, seed: int, **kwargs) -> RunReport:
    sim = Simulation(scenario, seed, **kwargs)
    return sim.run()
