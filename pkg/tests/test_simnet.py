import json

import pytest

from chainkv.simnet import ScenarioConfig, Simulation
from chainkv.simnet.scenario import FaultEvent, ScenarioError
from chainkv.wire import OpCode

SWS = ["10.0.0.1", "10.0.0.2", "10.0.0.3"]
SWS4 = SWS + ["10.0.0.4"]
PIN = ["10.0.0.1", "10.0.0.2", "10.0.0.3"]


def scenario(**kw):
    base = dict(
        switches=SWS,
        f=2,
        m=6,
        groups=1,
        ring_seed=1,
        ops=300,
        clients=4,
        key_count=8,
        write_ratio=0.5,
    )
    base.update(kw)
    return ScenarioConfig(**base)


def testbed(**kw):
    """Four switches, ring over three, one standby, pinned chain order."""
    base = dict(
        switches=SWS4,
        standby=["10.0.0.4"],
        f=2,
        m=9,
        groups=3,
        ring_seed=3,
        pin_chain_order=PIN,
        ops=1500,
        clients=6,
        key_count=12,
        write_ratio=0.5,
        client_attach=["10.0.0.1", "10.0.0.4"],
    )
    base.update(kw)
    return ScenarioConfig(**base)


class TestScenarioFormat:
    def test_round_trip(self):
        sc = testbed(faults=[FaultEvent(1000, "fail", "10.0.0.2")])
        again = ScenarioConfig.loads(sc.dumps())
        assert again == sc

    def test_validation(self):
        with pytest.raises(ScenarioError):
            ScenarioConfig.loads(json.dumps({"version": 1, "loss": 1.5}))
        with pytest.raises(ScenarioError):
            scenario(
                faults=[
                    FaultEvent(1, "fail", s) for s in SWS
                ]
            ).validate()

    def test_unsupported_version(self):
        with pytest.raises(ScenarioError):
            ScenarioConfig.loads('{"version": 99}')


class TestFaultFree:
    def test_all_ops_complete_no_violations(self):
        rep = Simulation(scenario(ops=1000), seed=3).run()
        assert rep.completed() == 1000
        assert rep.counters.get("timeouts", 0) == 0
        assert rep.violations == []

    def test_reads_return_written_values(self):
        sc = scenario(ops=200, write_ratio=1.0, key_count=4)
        sim = Simulation(sc, seed=5)
        rep = sim.run()
        assert rep.violations == []
        # final tail value equals the last acknowledged write per key
        last = {}
        for e in rep.history:
            if e.kind == "complete" and e.op == "write" and e.status == "ok":
                cur = last.get(e.key)
                if cur is None or (e.session, e.seq) > cur[0]:
                    last[e.key] = ((e.session, e.seq), e.value)
        for key, (ver, value) in last.items():
            chain = sim.controller.effective_chain(key)
            tail = sim.switches[chain[-1]]
            stored_value, sess, seq, valid = tail.store.read_slot(
                tail.store.lookup(key)
            )
            assert (sess, seq) >= ver
            if (sess, seq) == ver:
                assert stored_value == value

    def test_determinism_byte_identical_reports(self):
        sc = scenario(ops=400, loss=0.05, dup=0.02, reorder=0.02)
        a = Simulation(sc, seed=11).run().to_bytes()
        b = Simulation(sc, seed=11).run().to_bytes()
        assert a == b

    def test_different_seeds_differ(self):
        sc = scenario(ops=200, loss=0.05)
        a = Simulation(sc, seed=1).run().to_bytes()
        b = Simulation(sc, seed=2).run().to_bytes()
        assert a != b


class TestForcedReordering:
    def find_chain_key(self, sim, order):
        for i in range(200):
            key = f"probe-{i}".encode().ljust(16, b"\x00")
            if sim.controller.effective_chain(key) == order:
                return key
        pytest.fail("no key maps to the requested chain order")

    def test_reordered_writes_stay_consistent(self):
        """Two concurrent writes swapped on both inter-switch legs: the
        sequence guard drops the stale one and all replicas agree."""
        sc = testbed(ops=0, clients=2, jitter_us=0)
        chain = tuple(PIN)

        swaps = {}

        def delay_fn(cur, hop, pkt, base):
            # Delay the first write on each inter-switch link so the second
            # overtakes it.
            if pkt.op == OpCode.WRITE and (cur, hop) in (
                (chain[0], chain[1]),
                (chain[1], chain[2]),
            ):
                n = swaps.setdefault((cur, hop), 0)
                swaps[(cur, hop)] = n + 1
                if n == 0:
                    return base + 500
            return base

        sim = Simulation(sc, seed=7, delay_fn=delay_fn)
        sim.setup_keys()
        key = sim.keys[0]
        # two writes from two clients, back to back
        t0, t1 = sim.tasks[0], sim.tasks[1]
        t0.start_op(t0.agent.begin_write, key, b"B" * 4)
        t1.start_op(t1.agent.begin_write, key, b"C" * 4)
        while sim._heap:
            import heapq

            sim.now, _, fn = heapq.heappop(sim._heap)
            fn()
        assert sim.report.violations == []
        values = {
            ip: sim.switches[ip].store.read_slot(
                sim.switches[ip].store.lookup(key)
            )[0]
            for ip in chain
        }
        assert len(set(values.values())) == 1, values
        seq_guard_drops = sim.switch_counter_total("drop_seq_guard")
        assert seq_guard_drops >= 1


class TestLossAndRetries:
    def test_heavy_loss_durable_acks(self):
        sc = scenario(ops=400, loss=0.10, dup=0.05, reorder=0.05, key_count=6)
        sim = Simulation(sc, seed=13)
        rep = sim.run()
        assert rep.violations == []
        acked = {}
        for e in rep.history:
            if e.kind == "complete" and e.op == "write" and e.status == "ok":
                acked[e.key] = max(acked.get(e.key, (0, 0)), (e.session, e.seq))
        for key, ver in acked.items():
            chain = sim.controller.effective_chain(key)
            tail = sim.switches[chain[-1]]
            assert tail.store.version(tail.store.lookup(key)) >= ver

    def test_dropped_reply_retry_converges(self):
        """Drop the first reply to each client; the retried write must land
        on the retried value, never torn state."""
        dropped = set()

        def delay_fn(cur, hop, pkt, base):
            if pkt.op == OpCode.REPLY and pkt.req_id not in dropped:
                dropped.add(pkt.req_id)
                return base + 10_000_000  # effectively lost; retry wins
            return base

        sc = scenario(ops=40, write_ratio=1.0, key_count=2, clients=2)
        sim = Simulation(sc, seed=17, delay_fn=delay_fn)
        rep = sim.run()
        assert rep.violations == []
        assert rep.counters.get("retries", 0) >= 1
        assert rep.completed() == 40


class TestFailover:
    def test_mid_switch_failure_writes_survive(self):
        sc = testbed(
            ops=1200,
            faults=[
                FaultEvent(2000, "fail", "10.0.0.2"),
                FaultEvent(2500, "failover", "10.0.0.2"),
            ],
        )
        sim = Simulation(sc, seed=23)
        rep = sim.run()
        assert rep.violations == []
        assert rep.completed() == 1200

    def test_tail_failure_reads_served_by_predecessor(self):
        sc = testbed(
            ops=800,
            write_ratio=0.0,
            faults=[
                FaultEvent(1500, "fail", "10.0.0.3"),
                FaultEvent(1900, "failover", "10.0.0.3"),
            ],
        )
        sim = Simulation(sc, seed=29)
        rep = sim.run()
        assert rep.violations == []
        assert rep.completed() == 800
        assert sim.switch_counter_total("bypassed") > 0

    def test_head_failure_effective_head_stamps(self):
        sc = testbed(
            ops=800,
            write_ratio=1.0,
            faults=[
                FaultEvent(1500, "fail", "10.0.0.1"),
                FaultEvent(1900, "failover", "10.0.0.1"),
            ],
            client_attach=["10.0.0.3", "10.0.0.4"],
        )
        sim = Simulation(sc, seed=31)
        rep = sim.run()
        assert rep.violations == []
        assert rep.completed() == 800


class TestRecovery:
    def faults(self):
        return [
            FaultEvent(2000, "fail", "10.0.0.2"),
            FaultEvent(2400, "failover", "10.0.0.2"),
            FaultEvent(5000, "recover", "10.0.0.2", "10.0.0.4"),
        ]

    def test_recovery_zero_violations_and_full_completion(self):
        sc = testbed(ops=2500, faults=self.faults())
        sim = Simulation(sc, seed=37)
        rep = sim.run()
        assert rep.violations == []
        assert rep.completed() == 2500
        from chainkv.dataplane import SwitchStatus

        assert sim.controller.statuses["10.0.0.2"] == SwitchStatus.RECOVERED

    def test_replacement_serves_after_recovery(self):
        sc = testbed(ops=2500, faults=self.faults())
        sim = Simulation(sc, seed=41)
        sim.run()
        repl = sim.switches["10.0.0.4"]
        assert len(repl.store) > 0
        ops = repl.store  # replacement ended up indexed with chain keys
        for key in sim.keys:
            assert ops.contains(key)

    def test_held_queries_limited_to_recovering_group(self):
        """While one virtual group is stopped, other groups' traffic flows."""
        sc = testbed(ops=3000, groups=3, faults=self.faults(), stop_dwell_us=1500)
        sim = Simulation(sc, seed=43)

        held_groups = set()
        orig = sim._on_controller_step

        def spy(step, done):
            for st in sim.switches.values():
                for dst, stop in st.stops.items():
                    held_groups.update(stop.groups or set())
            orig(step, done)

        sim._on_controller_step = spy
        rep = sim.run()
        assert rep.violations == []
        # stops existed, and each stop was scoped to a single group
        for st in sim.switches.values():
            for pkts in st.held.values():
                for pkt in pkts:
                    assert sim.controller.group_of(pkt.key) in held_groups
