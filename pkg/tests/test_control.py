import random

import pytest

from chainkv import dataplane
from chainkv.control import (
    Controller,
    ControlError,
    NoEligibleSwitch,
    Phase,
    Topology,
    UnknownSwitch,
)
from chainkv.dataplane import RuleMode, SwitchState, SwitchStatus
from chainkv.placement import build_ring
from chainkv.store import KVStore, NotFound, StoreFull

S0, S1, S2, S3 = "10.0.0.1", "10.0.0.2", "10.0.0.3", "10.0.0.4"
ALL = [S0, S1, S2, S3]


class DirectAdmin:
    """In-memory admin handle; optionally fails after a scripted number of
    calls to exercise crash interleavings."""

    def __init__(self, state, fail_after=None):
        self.state = state
        self.ip = state.ip
        self.calls = 0
        self.fail_after = fail_after

    def _tick(self):
        self.calls += 1
        if self.fail_after is not None and self.calls > self.fail_after:
            raise ConnectionError(f"{self.ip} unreachable")

    def install_rule(self, rule):
        self._tick()
        dataplane.install_rule(self.state, rule)

    def remove_rule(self, dst):
        self._tick()
        dataplane.remove_rule(self.state, dst)

    def set_stop(self, dst, stop):
        self._tick()
        dataplane.set_stop(self.state, dst, stop)

    def clear_stop(self, dst):
        self._tick()
        dataplane.clear_stop(self.state, dst)

    def set_status(self, status, write_fwd=None, read_fwd=None):
        dataplane.set_status(self.state, status, write_fwd, read_fwd)

    def bump_session(self, session):
        self._tick()
        dataplane.bump_session(self.state, session)

    def snapshot(self, keys=None):
        self._tick()
        return self.state.store.snapshot(keys)

    def apply_entries(self, image):
        self._tick()
        return self.state.store.apply_entries(image)

    def insert(self, key, value):
        self._tick()
        self.state.store.insert_index(key, value)

    def tombstone(self, key):
        self._tick()
        self.state.store.tombstone(self.state.store.lookup(key))

    def gc(self, key):
        self._tick()
        self.state.store.gc(key)


def full_mesh(nodes):
    return Topology(
        {a: {b for b in nodes if b != a} for a in nodes}, set(nodes)
    )


def make_cluster(standby=(S3,), groups=1, keys=8, capacity=64):
    ring_sws = [s for s in ALL if s not in standby]
    ring = build_ring(ring_sws, m=9, f=2, groups=groups, seed=3)
    states = {ip: SwitchState(ip=ip, store=KVStore(capacity)) for ip in ALL}
    admins = {ip: DirectAdmin(states[ip]) for ip in ALL}
    ctrl = Controller(
        ring,
        full_mesh(ALL),
        bus=lambda ip: admins.get(ip),
        standby=list(standby),
    )
    for st in states.values():
        st.group_of = ctrl.group_of
    for i in range(keys):
        ctrl.admin_insert(f"key-{i}".encode().ljust(16, b"\x00"), b"init")
    return ctrl, states, admins


def versions(ctrl, states, key):
    out = {}
    for ip, st in states.items():
        try:
            out[ip] = st.store.version(st.store.lookup(key))
        except NotFound:
            pass
    return out


class TestTopology:
    def test_neighbors(self):
        topo = full_mesh(ALL)
        assert topo.neighbors(S1) == frozenset({S0, S2, S3})

    def test_asymmetric_rejected(self):
        with pytest.raises(ControlError):
            Topology({S0: {S1}, S1: set()}, {S0, S1})

    def test_next_hop_line(self):
        topo = Topology(
            {S0: {S1}, S1: {S0, S2}, S2: {S1, S3}, S3: {S2}}, set(ALL)
        )
        assert topo.next_hop(S0, S3) == S1
        assert topo.next_hop(S1, S3) == S2
        assert topo.next_hop(S3, S3) is None

    def test_unknown_switch(self):
        with pytest.raises(UnknownSwitch):
            full_mesh(ALL).neighbors("10.9.9.9")


class TestFailover:
    def test_rules_on_exactly_the_neighbors(self):
        ctrl, states, _ = make_cluster()
        ctrl.mark_failed(S1)
        installs = ctrl.failover(S1)
        assert sorted(nb for nb, _ in installs) == sorted({S0, S2, S3})
        for nb in (S0, S2, S3):
            assert states[nb].rules[S1].mode == RuleMode.BYPASS
        assert S1 not in states[S1].rules

    def test_failover_idempotent(self):
        ctrl, states, _ = make_cluster()
        ctrl.mark_failed(S1)
        ctrl.failover(S1)
        ctrl.failover(S1)
        assert len(states[S0].rules) == 1

    def test_neighbor_count_beats_strawman(self):
        # The strawman touches m(f+1)/n switches; neighbors are far fewer.
        ctrl, _, _ = make_cluster()
        ctrl.mark_failed(S1)
        installs = ctrl.failover(S1)
        m, f, n = 128, 2, 4
        assert len(installs) < m * (f + 1) / n

    def test_unknown_switch(self):
        ctrl, _, _ = make_cluster()
        with pytest.raises(UnknownSwitch):
            ctrl.failover("10.9.9.9")


class TestRecovery:
    def test_middle_recovery_restores_chain(self):
        ctrl, states, _ = make_cluster()
        key = f"key-0".encode().ljust(16, b"\x00")
        chain = ctrl.base_chain(key)
        failed = chain[1]
        ctrl.mark_failed(failed)
        ctrl.failover(failed)
        plan = ctrl.run_recovery(failed, S3)
        assert not plan.aborted
        assert ctrl.statuses[failed] == SwitchStatus.RECOVERED
        eff = ctrl.effective_chain(key)
        assert S3 in eff and failed not in eff and len(eff) == 3
        assert eff.index(S3) == chain.index(failed)

    def test_replacement_matches_reference_versions(self):
        ctrl, states, _ = make_cluster()
        # age some keys at different versions on the live members
        for i in range(8):
            key = f"key-{i}".encode().ljust(16, b"\x00")
            for ip in ctrl.base_chain(key):
                st = states[ip]
                st.store.write_slot(st.store.lookup(key), b"v2", 0, 2 + i)
        ctrl.mark_failed(S1)
        ctrl.failover(S1)
        ctrl.run_recovery(S1, S3)
        for i in range(8):
            key = f"key-{i}".encode().ljust(16, b"\x00")
            chain = ctrl.base_chain(key)
            if S3 not in chain:
                continue
            idx = chain.index(S3)
            ref = chain[idx + 1] if idx + 1 < len(chain) else chain[idx - 1]
            vs = versions(ctrl, states, key)
            assert vs[S3] == vs[ref]

    def test_reference_selection_per_position(self):
        ctrl, _, _ = make_cluster()
        chain = (S0, S1, S2)
        # middle fails: reference is the next hop
        assert ctrl._ref_for(chain, S1) == S2
        # head fails: reference is the next hop
        assert ctrl._ref_for(chain, S0) == S1
        # tail fails: no next hop, fall back to the previous live hop
        assert ctrl._ref_for(chain, S2) == S1
        # tail fails with its predecessor also down: go one further back
        ctrl.statuses[S1] = SwitchStatus.FAILED
        assert ctrl._ref_for(chain, S2) == S0

    def test_session_bump_on_head_recovery(self):
        ctrl, states, _ = make_cluster()
        before = ctrl.session_counter
        ctrl.mark_failed(S1)
        ctrl.failover(S1)
        ctrl.run_recovery(S1, S3)
        heads_s1 = any(ctrl.base_chain(k)[0] == S3 for k in ctrl.keys)
        if heads_s1:
            assert ctrl.session_counter == before + 1
            assert states[S3].session == ctrl.session_counter

    def test_no_session_bump_when_mutated(self):
        from chainkv.dataplane import Mutations

        ctrl, states, admins = make_cluster()
        ctrl.mutations = Mutations(skip_session_bump=True)
        ctrl.mark_failed(S1)
        ctrl.failover(S1)
        ctrl.run_recovery(S1, S3)
        assert states[S3].session == 0

    def test_recovery_requires_alive_replacement(self):
        ctrl, _, _ = make_cluster()
        ctrl.mark_failed(S1)
        ctrl.mark_failed(S3)
        with pytest.raises(ControlError):
            ctrl.plan_recovery(S1, S3)

    def test_replacement_inside_chain_rejected(self):
        # No standby ring over 3 switches: every chain is exactly the three
        # ring members, so any live switch already serves every chain.
        ring_sws = [S0, S1, S2]
        ring = build_ring(ring_sws, m=6, f=2, groups=1, seed=3)
        states = {ip: SwitchState(ip=ip, store=KVStore(64)) for ip in ring_sws}
        admins = {ip: DirectAdmin(states[ip]) for ip in ring_sws}
        ctrl = Controller(ring, full_mesh(ring_sws), bus=lambda ip: admins.get(ip))
        ctrl.admin_insert(b"k".ljust(16, b"\x00"), b"v")
        ctrl.mark_failed(S1)
        ctrl.failover(S1)
        with pytest.raises(NoEligibleSwitch):
            ctrl.plan_recovery(S1, S0)

    def test_abort_on_replacement_failure_midway(self):
        ctrl, states, _ = make_cluster(groups=4)
        ctrl.mark_failed(S1)
        ctrl.failover(S1)
        plan = ctrl.plan_recovery(S1, S3)
        steps = list(ctrl.recovery_steps(plan))
        ctrl.apply_step(steps[0])
        ctrl.mark_failed(S3)  # replacement dies mid-recovery
        for step in steps[1:]:
            ctrl.apply_step(step)
        assert plan.aborted
        assert ctrl.statuses[S1] == SwitchStatus.FAILED
        assert S1 not in ctrl.replacements
        for nb in (S0, S2):
            assert states[nb].rules[S1].mode == RuleMode.BYPASS


class TestAssignReplacements:
    def test_spread_over_live_switches(self):
        ring = build_ring(ALL, m=12, f=0, groups=1, seed=2)
        states = {ip: SwitchState(ip=ip, store=KVStore(8)) for ip in ALL}
        admins = {ip: DirectAdmin(states[ip]) for ip in ALL}
        ctrl = Controller(ring, full_mesh(ALL), bus=lambda ip: admins.get(ip))
        ctrl.mark_failed(S1)
        assignment = ctrl.assign_replacements(S1, random.Random(5))
        assert set(assignment) == set(ring.vnodes_of(S1))
        assert len(set(assignment.values())) >= 2
        assert all(sw != S1 for sw in assignment.values())

    def test_no_eligible_switch(self):
        sws = ALL[:3]
        ring = build_ring(sws, m=6, f=2, groups=1, seed=2)
        states = {ip: SwitchState(ip=ip, store=KVStore(8)) for ip in sws}
        admins = {ip: DirectAdmin(states[ip]) for ip in sws}
        ctrl = Controller(ring, full_mesh(sws), bus=lambda ip: admins.get(ip))
        ctrl.mark_failed(S1)
        with pytest.raises(NoEligibleSwitch):
            ctrl.assign_replacements(S1, random.Random(5))

    def test_deterministic_under_seed(self):
        ring = build_ring(ALL, m=12, f=1, groups=1, seed=2)
        states = {ip: SwitchState(ip=ip, store=KVStore(8)) for ip in ALL}
        admins = {ip: DirectAdmin(states[ip]) for ip in ALL}
        ctrl = Controller(ring, full_mesh(ALL), bus=lambda ip: admins.get(ip))
        ctrl.mark_failed(S1)
        a = ctrl.assign_replacements(S1, random.Random(9))
        b = ctrl.assign_replacements(S1, random.Random(9))
        assert a == b


class TestInsertDelete:
    def test_insert_then_present_on_whole_chain(self):
        ctrl, states, _ = make_cluster(keys=0)
        key = b"fresh".ljust(16, b"\x00")
        ctrl.admin_insert(key, b"hello")
        for ip in ctrl.base_chain(key):
            st = states[ip]
            assert st.store.read_slot(st.store.lookup(key))[0] == b"hello"

    def test_delete_removes_everywhere(self):
        ctrl, states, _ = make_cluster(keys=0)
        key = b"gone".ljust(16, b"\x00")
        ctrl.admin_insert(key, b"x")
        ctrl.admin_delete(key)
        for ip in ctrl.base_chain(key):
            with pytest.raises(NotFound):
                states[ip].store.lookup(key)
        assert key not in ctrl.keys

    def test_insert_is_tail_first(self):
        """Crash the install at every prefix: a reader at the tail either
        finds the value or nothing; an upstream entry never exists without
        its downstream one."""
        for fail_after in range(0, 4):
            ctrl, states, admins = make_cluster(keys=0)
            key = b"partial".ljust(16, b"\x00")
            chain = ctrl.base_chain(key)
            for admin in admins.values():
                admin.fail_after = fail_after
            try:
                ctrl.admin_insert(key, b"v")
            except ConnectionError:
                pass
            present = [ip for ip in chain if states[ip].store.contains(key)]
            # installs run tail-to-head, so present members form a suffix
            assert present == list(chain[len(chain) - len(present):])

    def test_store_full_rolls_back(self):
        ctrl, states, _ = make_cluster(keys=0, capacity=1)
        k1 = b"one".ljust(16, b"\x00")
        ctrl.admin_insert(k1, b"v")
        clash = next(
            k
            for i in range(100)
            for k in [f"clash-{i}".encode().ljust(16, b"\x00")]
            if ctrl.base_chain(k)[-1] == ctrl.base_chain(k1)[-1]
        )
        with pytest.raises(StoreFull):
            ctrl.admin_insert(clash, b"v")
        for st in states.values():
            assert not st.store.contains(clash)


class TestCommands:
    def test_command_surface(self):
        ctrl, states, _ = make_cluster()
        assert ctrl.handle_command("status").startswith("OK")
        assert ctrl.handle_command("mark-failed " + S1) == "OK"
        assert ctrl.handle_command("failover " + S1) == "OK 3 rules"
        assert ctrl.handle_command("recover " + S1 + " " + S3) == "OK"
        assert "recovered" in ctrl.handle_command("status")
        assert ctrl.handle_command("ring").startswith("OK {")
        assert ctrl.handle_command("bogus").startswith("ERR")
        assert ctrl.handle_command("failover 10.9.9.9").startswith("ERR")
