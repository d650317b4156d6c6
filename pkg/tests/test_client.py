import random

import pytest

from chainkv.client import (
    Agent,
    AgentBusy,
    AgentConfig,
    ClientError,
    TwoPhaseLocking,
    UNLOCKED,
    build_request,
    history_dumps,
    history_loads,
    lock_value,
    normalize_key,
    txn_2pl,
)
from chainkv.wire import (
    FLAG_CAS_FAIL,
    FLAG_NOT_FOUND,
    OpCode,
    Packet,
    ip_to_u32,
)

CHAIN = ("10.0.0.1", "10.0.0.2", "10.0.0.3")
KEY = b"k".ljust(16, b"\x00")


def agent(timeout_us=1000, max_retries=2, chain=CHAIN):
    return Agent(
        ring_provider=None,
        config=AgentConfig("10.1.0.1", timeout_us=timeout_us, max_retries=max_retries),
        chain_provider=lambda key: chain,
    )


def reply_for(pkt, value=b"", session=0, seq=0, flags=0):
    return Packet(
        op=OpCode.REPLY,
        key=pkt.key,
        client_id=pkt.client_id,
        req_id=pkt.req_id,
        session=session,
        seq=seq,
        value=value,
        flags=flags,
    )


class TestPacketConstruction:
    def test_read_addresses_tail_with_reversed_chain(self):
        a = agent()
        (dst, pkt), = a.begin_read(KEY, now=0)
        assert dst == "10.0.0.3"
        assert pkt.chain == ("10.0.0.2", "10.0.0.1")
        assert pkt.sc == 2
        assert pkt.op == OpCode.READ

    def test_write_addresses_head_in_chain_order(self):
        a = agent()
        (dst, pkt), = a.begin_write(KEY, b"v", now=0)
        assert dst == "10.0.0.1"
        assert pkt.chain == ("10.0.0.2", "10.0.0.3")
        assert (pkt.session, pkt.seq) == (0, 0)

    def test_single_switch_chain_empty_list(self):
        a = agent(chain=("10.0.0.1",))
        (dst, pkt), = a.begin_read(KEY, now=0)
        assert dst == "10.0.0.1" and pkt.chain == () and pkt.sc == 0

    def test_build_request_helper_matches_agent(self):
        (dst, pkt) = build_request(
            OpCode.WRITE, KEY, b"v", ip_to_u32("10.1.0.1"), 1, CHAIN
        )
        a = agent()
        (adst, apkt), = a.begin_write(KEY, b"v", now=0)
        assert (dst, pkt.chain) == (adst, apkt.chain)

    def test_key_normalization(self):
        a = agent()
        (dst, pkt), = a.begin_read(b"short", now=0)
        assert len(pkt.key) == 16
        with pytest.raises(ClientError):
            normalize_key(b"x" * 17)


class TestReplyHandling:
    def test_complete_and_result(self):
        a = agent()
        (dst, pkt), = a.begin_write(KEY, b"v", now=5)
        res = a.on_reply(reply_for(pkt, value=b"v", session=1, seq=9), now=11)
        assert res.ok and (res.session, res.seq) == (1, 9)
        kinds = [(e.kind, e.op) for e in a.history]
        assert kinds == [("invoke", "write"), ("complete", "write")]
        assert a.history[1].ts == 11

    def test_duplicate_reply_ignored(self):
        a = agent()
        (dst, pkt), = a.begin_write(KEY, b"v", now=0)
        first = a.on_reply(reply_for(pkt, seq=1), now=1)
        second = a.on_reply(reply_for(pkt, seq=1), now=2)
        assert first is not None and second is None
        assert sum(1 for e in a.history if e.kind == "complete") == 1

    def test_mismatched_req_id_ignored(self):
        a = agent()
        (dst, pkt), = a.begin_read(KEY, now=0)
        stale = reply_for(pkt, seq=1)
        stale = Packet(
            op=stale.op, key=stale.key, client_id=stale.client_id,
            req_id=999, session=0, seq=1, value=b"",
        )
        assert a.on_reply(stale, now=1) is None

    def test_not_found_and_cas_fail_status(self):
        a = agent()
        (dst, pkt), = a.begin_read(KEY, now=0)
        res = a.on_reply(reply_for(pkt, flags=FLAG_NOT_FOUND), now=1)
        assert res.status == "not_found"
        (dst, pkt), = a.begin_lock_acquire(KEY, now=2)
        res = a.on_reply(reply_for(pkt, flags=FLAG_CAS_FAIL), now=3)
        assert res.status == "cas_fail"

    def test_serial_agent_rejects_overlap(self):
        a = agent()
        a.begin_read(KEY, now=0)
        with pytest.raises(AgentBusy):
            a.begin_write(KEY, b"v", now=1)


class TestRetry:
    def test_retry_reuses_req_id(self):
        a = agent(timeout_us=100, max_retries=2)
        (dst, pkt), = a.begin_write(KEY, b"v", now=0)
        emits, timed_out = a.on_tick(now=100)
        assert timed_out is None
        (rdst, rpkt), = emits
        assert rpkt.req_id == pkt.req_id
        assert (rpkt.session, rpkt.seq) == (0, 0)

    def test_timeout_after_retries_exhausted(self):
        a = agent(timeout_us=100, max_retries=1)
        a.begin_write(KEY, b"v", now=0)
        a.on_tick(now=100)
        emits, timed_out = a.on_tick(now=200)
        assert emits == [] and timed_out.status == "timeout"
        assert all(e.kind != "complete" for e in a.history)

    def test_retry_rebuilds_from_fresh_chain(self):
        chains = [("10.0.0.1", "10.0.0.2"), ("10.0.0.9", "10.0.0.2")]
        provider = lambda key: chains[0]
        a = Agent(
            ring_provider=None,
            config=AgentConfig("10.1.0.1", timeout_us=100, max_retries=1),
            chain_provider=lambda key: provider(key),
        )
        a.begin_write(KEY, b"v", now=0)
        provider = lambda key: chains[1]
        emits, _ = a.on_tick(now=100)
        assert emits[0][0] == "10.0.0.9"

    def test_no_result_twice_for_one_req(self):
        a = agent(timeout_us=100, max_retries=1)
        (dst, pkt), = a.begin_write(KEY, b"v", now=0)
        a.on_tick(now=100)  # retry in flight
        first = a.on_reply(reply_for(pkt, seq=3), now=150)
        dup = a.on_reply(reply_for(pkt, seq=3), now=160)
        assert first is not None and dup is None


class TestLocks:
    def test_lock_value_encoding(self):
        assert lock_value(0x0A010001) == b"\x0a\x01\x00\x01"
        assert UNLOCKED == b"\x00\x00\x00\x00"

    def test_acquire_sends_cas_with_own_id(self):
        a = agent()
        (dst, pkt), = a.begin_lock_acquire(KEY, now=0)
        assert pkt.op == OpCode.CAS
        assert pkt.value == lock_value(a.client_id)

    def test_release_sends_unlocked(self):
        a = agent()
        (dst, pkt), = a.begin_lock_release(KEY, now=0)
        assert pkt.value == UNLOCKED


class FakeLockServer:
    """Atomic lock-table stand-in for driving the 2PL state machine."""

    def __init__(self):
        self.owners = {}

    def client(self, cid):
        outer = self

        class _C:
            def lock_acquire(self, key):
                cur = outer.owners.get(key, 0)
                if cur in (0, cid):
                    outer.owners[key] = cid
                    return True
                return False

            def lock_release(self, key):
                cur = outer.owners.get(key, 0)
                if cur in (0, cid):
                    outer.owners[key] = 0
                    return True
                return False

        return _C()


class TestTwoPhaseLocking:
    HOT = [f"hot-{i}".encode().ljust(16, b"\x00") for i in range(16)]
    COLD = [f"cold-{i}".encode().ljust(16, b"\x00") for i in range(64)]

    def test_single_client_commits_all(self):
        server = FakeLockServer()
        done = txn_2pl(
            server.client(1), self.HOT, self.COLD, 1.0, txns=50, rng=random.Random(1)
        )
        assert done == 50
        assert all(v == 0 for v in server.owners.values())

    def test_contention_index_selects_hot_pool(self):
        wl = TwoPhaseLocking(self.HOT, self.COLD, 0.25, random.Random(2), max_txns=100)
        picked = set()
        while not wl.done():
            kind, key = wl.next_op()
            if kind == "acquire" and key in self.HOT:
                picked.add(key)
            wl.feed(True)
        assert picked <= set(self.HOT[:4])

    def test_abort_releases_held_locks(self):
        wl = TwoPhaseLocking(self.HOT, self.COLD, 1.0, random.Random(3), max_txns=1)
        ops = []
        # Acquire two locks, then fail the third: both held ones release.
        for grant in (True, True, False):
            kind, key = wl.next_op()
            ops.append((kind, key))
            wl.feed(grant)
        releases = []
        while True:
            op = wl.next_op()
            if op is None or op[0] != "release":
                break
            releases.append(op[1])
            wl.feed(True)
        assert releases == [k for kind, k in ops[:2]]
        assert wl.aborts == 1 and wl.committed == 0

    def test_two_clients_serialize_on_one_hot_item(self):
        server = FakeLockServer()
        a = TwoPhaseLocking(self.HOT, self.COLD, 1.0, random.Random(4), max_txns=20)
        b = TwoPhaseLocking(self.HOT, self.COLD, 1.0, random.Random(5), max_txns=20)
        clients = [(a, server.client(1)), (b, server.client(2))]
        rng = random.Random(6)
        guard = 0
        while (not a.done() or not b.done()) and guard < 100_000:
            guard += 1
            wl, cl = clients[rng.randrange(2)]
            op = wl.next_op()
            if op is None:
                continue
            kind, key = op
            wl.feed(cl.lock_acquire(key) if kind == "acquire" else cl.lock_release(key))
        assert a.committed == 20 and b.committed == 20

    def test_invalid_contention_index(self):
        with pytest.raises(ClientError):
            TwoPhaseLocking(self.HOT, self.COLD, 0.0, random.Random(1))


class TestHistoryFormat:
    def test_round_trip(self):
        a = agent()
        (dst, pkt), = a.begin_write(KEY, b"v\x00\xff", now=3)
        a.on_reply(reply_for(pkt, value=b"v\x00\xff", session=1, seq=2), now=9)
        text = history_dumps(a.history)
        assert history_loads(text) == a.history

    def test_rejects_malformed_line(self):
        with pytest.raises(ClientError):
            history_loads("1\t2\tinvoke\n")

    def test_empty(self):
        assert history_dumps([]) == ""
        assert history_loads("") == []
