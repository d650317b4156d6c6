"""Bounded exhaustive exploration of the replication protocol.

This models the protocol at the abstraction used for model checking: one
client with unbounded outstanding requests, a chain of switches holding
(value, version) per key, single-slot switch inboxes, and one FIFO buffer
per directed node pair.  The adversary may drop, repeat, or reorder buffered
messages (within a global budget), fail chain switches, and recover them by
atomically copying a live neighbor's memory to a spare.

A failed switch forwards instead of processing: reads to its previous hop,
writes to its next hop (popping one chain hop), which abstracts the
neighbor-rule failover of the concrete data plane.  Version stamping happens
wherever a version-0 write arrives, so the effective head after a failure
stamps exactly like the original head.

Exploration is breadth-first (counterexamples are minimal-length), with
states deduplicated by fingerprint and expansion pruned by the bound
constraints; every generated state is still invariant-checked, pruned or
not.

Checked invariants:
- TypeInvariant: structural well-formedness of the state.
- Consistency: the client never observes a version decrease on any key.
- UpdatePropagation: an upstream chain member's stored version is >= its
  successor's, substituting replacements for recovered switches and
  skipping failed, unreplaced ones.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Optional

from ..dataplane import Mutations

READ, WRITE, REPLY = 0, 1, 2
ALIVE, FAILED, RECOVERED = 0, 1, 2

STATE_CAP_DEFAULT = 10_000_000

INVARIANTS = ("TypeInvariant", "Consistency", "UpdatePropagation")


class ExploreError(Exception):
    pass


@dataclass(frozen=True)
class ExploreBounds:
    max_qlen: int = 2
    max_failed: int = 1
    max_version: int = 3
    max_bufops: int = 2

    def __post_init__(self):
        for v in (self.max_qlen, self.max_failed, self.max_version, self.max_bufops):
            if v < 0:
                raise ExploreError("bounds must be >= 0")


@dataclass
class ExploreConfig:
    switches: int = 4
    keys: int = 1
    values: int = 2
    bounds: ExploreBounds = field(default_factory=ExploreBounds)
    mutations: Mutations = field(default_factory=Mutations)
    check: tuple[str, ...] = INVARIANTS
    state_cap: int = STATE_CAP_DEFAULT
    trace: bool = True
    progress: Optional[object] = None  # callable(depth, states, transitions, frontier)
    # Value symmetry reduction; disabled automatically when tracing so a
    # counterexample's events replay verbatim.
    symmetry: bool = True

    @property
    def chain_len(self) -> int:
        return self.switches - self.bounds.max_failed

    @property
    def client(self) -> int:
        return self.switches


@dataclass
class ExploreResult:
    ok: bool
    states: int
    transitions: int
    depth: int
    capped: bool = False
    violation: Optional[str] = None  # invariant name
    detail: str = ""
    trace: Optional[list[tuple]] = None


# Decoded state:
#   mem:    list[n*K*2]  (value, version) per switch per key
#   sbuf:   list[n]      None or message tuple
#   status: list[n]
#   rfwd / wfwd: list[n] forward hop (client id == "none")
#   fcount, bops: ints
#   prevkv / curkv: list[2*K]
#   chans:  dict[(src, dst)] -> tuple of messages
# Message: (op, key, val, ver, hops-tuple)


class _Model:
    def __init__(self, cfg: ExploreConfig):
        if cfg.chain_len < 1:
            raise ExploreError("chain length would be < 1")
        self.cfg = cfg
        self.n = cfg.switches
        self.client = cfg.client
        self.chain = tuple(range(cfg.chain_len))
        self.keys = range(cfg.keys)
        self.values = range(1, cfg.values + 1)
        self.checks = cfg.check
        self._mcache: dict[tuple, bytes] = {}
        self._bcache: dict[tuple, bytes] = {}
        self._qcache: dict[tuple, bytes] = {}

    # ------------------------------------------------------------------ state

    def initial(self):
        n, k = self.n, self.cfg.keys
        return (
            [0] * (n * k * 2),  # mem
            [None] * n,  # sbuf
            [ALIVE] * n,  # status
            [self.client] * n,  # rfwd
            [self.client] * n,  # wfwd
            0,  # fcount
            0,  # bops
            [0] * (2 * k),  # prevkv
            [0] * (2 * k),  # curkv
            {},  # chans
        )

    def encode(self, s) -> bytes:
        mem, sbuf, status, rfwd, wfwd, fcount, bops, prevkv, curkv, chans = s
        parts = [
            bytes(
                mem + status + rfwd + wfwd + [fcount, bops] + prevkv + curkv
            )
        ]
        bcache = self._bcache
        for m in sbuf:
            if m is None:
                parts.append(b"\x00")
            else:
                b = bcache.get(m)
                if b is None:
                    b = b"\x01" + self._msg_bytes(m)
                    bcache[m] = b
                parts.append(b)
        items = sorted(chans.items())
        parts.append(bytes((len(items),)))
        qcache = self._qcache
        for item in items:
            b = qcache.get(item)
            if b is None:
                (src, dst), q = item
                b = bytes((src, dst, len(q))) + b"".join(
                    self._msg_bytes(m) for m in q
                )
                qcache[item] = b
            parts.append(b)
        return b"".join(parts)

    def _msg_bytes(self, m) -> bytes:
        b = self._mcache.get(m)
        if b is None:
            op, key, val, ver, hops = m
            b = bytes((op, key, val, ver, len(hops)) + hops)
            self._mcache[m] = b
        return b

    def decode(self, b: bytes):
        n, k = self.n, self.cfg.keys
        i = 0
        mem = list(b[i : i + n * k * 2]); i += n * k * 2
        status = list(b[i : i + n]); i += n
        rfwd = list(b[i : i + n]); i += n
        wfwd = list(b[i : i + n]); i += n
        fcount = b[i]; i += 1
        bops = b[i]; i += 1
        prevkv = list(b[i : i + 2 * k]); i += 2 * k
        curkv = list(b[i : i + 2 * k]); i += 2 * k
        sbuf = []
        for _ in range(n):
            if b[i] == 0:
                sbuf.append(None)
                i += 1
            else:
                i += 1
                m, i = self._dec_msg(b, i)
                sbuf.append(m)
        chans = {}
        count = b[i]; i += 1
        for _ in range(count):
            src, dst, qlen = b[i], b[i + 1], b[i + 2]
            i += 3
            q = []
            for _ in range(qlen):
                m, i = self._dec_msg(b, i)
                q.append(m)
            chans[(src, dst)] = tuple(q)
        return (mem, sbuf, status, rfwd, wfwd, fcount, bops, prevkv, curkv, chans)

    @staticmethod
    def _dec_msg(b: bytes, i: int):
        op, key, val, ver, hlen = b[i], b[i + 1], b[i + 2], b[i + 3], b[i + 4]
        i += 5
        hops = tuple(b[i : i + hlen])
        i += hlen
        return (op, key, val, ver, hops), i

    def canonicalize(self, s):
        """Rename values by first appearance in a fixed scan order.  Values
        are opaque payloads, so states identical up to a value permutation
        satisfy exactly the same invariants (symmetry reduction).  The scan
        short-circuits as soon as the permutation is forced; the common
        identity case costs one partial scan and no allocation."""
        mem, sbuf, status, rfwd, wfwd, fcount, bops, prevkv, curkv, chans = s
        want = self.cfg.values
        theta = self.cfg.bounds.max_version + 1
        perm: dict[int, int] = {}
        high: set[int] = set()
        chan_items = sorted(chans.items())

        def see(v: int, ver: int) -> None:
            if v and v not in perm and len(perm) < want:
                perm[v] = len(perm) + 1
            if ver >= theta:
                high.add(ver)

        for i in range(0, len(mem), 2):
            see(mem[i], mem[i + 1])
        for vec in (prevkv, curkv):
            for i in range(0, len(vec), 2):
                see(vec[i], vec[i + 1])
        for m in sbuf:
            if m is not None:
                see(m[2], m[3])
        for _, q in chan_items:
            for m in q:
                see(m[2], m[3])

        # Version rank compression: values >= theta keep only their relative
        # order.  Every comparison in the transition relation, invariant, or
        # bound is either against a constant < theta or between two version
        # values, so an order-preserving remap reaches exactly the same
        # verdicts (the stamping rule ver+1 commutes with the remap).
        vmap: dict[int, int] = {}
        for rank, v in enumerate(sorted(high)):
            if v != theta + rank:
                vmap[v] = theta + rank
        id_perm = all(k == v for k, v in perm.items())
        if id_perm and not vmap:
            return s
        g = perm.get
        h = vmap.get

        def pv(vec):
            out = list(vec)
            for i in range(0, len(out), 2):
                v = out[i]
                if v:
                    out[i] = g(v, v)
                ver = out[i + 1]
                if ver >= theta:
                    out[i + 1] = h(ver, ver)
            return out

        def pmsg(m):
            return (m[0], m[1], g(m[2], m[2]), h(m[3], m[3]), m[4])

        nbuf = [m if m is None else pmsg(m) for m in sbuf]
        nchans = {pair: tuple(pmsg(m) for m in q) for pair, q in chan_items}
        return (
            pv(mem), nbuf, status, rfwd, wfwd, fcount, bops, pv(prevkv), pv(curkv), nchans
        )

    # ------------------------------------------------------------ chain helpers

    def _next_alive(self, status, wfwd, s: int) -> int:
        """Next usable hop after s: alive successor, a recovered
        successor's replacement, or the client if the chain ends."""
        idx = self.chain.index(s)
        while True:
            idx += 1
            if idx >= len(self.chain):
                return self.client
            nxt = self.chain[idx]
            if status[nxt] == ALIVE:
                return nxt
            if status[nxt] == RECOVERED:
                return wfwd[nxt]

    def _prev_alive(self, status, wfwd, s: int) -> int:
        idx = self.chain.index(s)
        while True:
            idx -= 1
            if idx < 0:
                return self.client
            prv = self.chain[idx]
            if status[prv] == ALIVE:
                return prv
            if status[prv] == RECOVERED:
                return wfwd[prv]

    # ------------------------------------------------------------- invariants

    def check(self, s) -> Optional[tuple[str, str]]:
        mem, sbuf, status, rfwd, wfwd, fcount, bops, prevkv, curkv, chans = s
        k = self.cfg.keys
        if "TypeInvariant" in self.checks:
            for v in status:
                if v not in (ALIVE, FAILED, RECOVERED):
                    return ("TypeInvariant", f"bad status {v}")
            for fwd in (rfwd, wfwd):
                for v in fwd:
                    if not 0 <= v <= self.client:
                        return ("TypeInvariant", f"bad forward hop {v}")
            for i in range(0, len(mem), 2):
                if mem[i] > self.cfg.values or mem[i + 1] > 250:
                    return ("TypeInvariant", f"bad memory cell at {i}")
        if "Consistency" in self.checks:
            for key in range(k):
                if prevkv[2 * key + 1] > curkv[2 * key + 1]:
                    return (
                        "Consistency",
                        f"key {key}: observed version fell from "
                        f"{prevkv[2 * key + 1]} to {curkv[2 * key + 1]}",
                    )
        if "UpdatePropagation" in self.checks:
            for i, up_sw in enumerate(self.chain):
                up = self._resolve(status, wfwd, up_sw)
                if up == self.client:
                    continue
                for down_sw in self.chain[i + 1 :]:
                    down = self._resolve(status, wfwd, down_sw)
                    if down == self.client:
                        continue
                    for key in range(k):
                        if mem[(up * k + key) * 2 + 1] < mem[(down * k + key) * 2 + 1]:
                            return (
                                "UpdatePropagation",
                                f"key {key}: upstream s{up_sw}(->s{up}) ver "
                                f"{mem[(up * k + key) * 2 + 1]} < downstream "
                                f"s{down_sw}(->s{down}) ver "
                                f"{mem[(down * k + key) * 2 + 1]}",
                            )
        return None

    def _resolve(self, status, wfwd, sw: int) -> int:
        if status[sw] == ALIVE:
            return sw
        if status[sw] == RECOVERED:
            return wfwd[sw]
        return self.client

    def within_bounds(self, s) -> bool:
        mem, sbuf, status, rfwd, wfwd, fcount, bops, prevkv, curkv, chans = s
        b = self.cfg.bounds
        if fcount > b.max_failed or bops > b.max_bufops:
            return False
        for key in range(self.cfg.keys):
            if curkv[2 * key + 1] > b.max_version:
                return False
        for q in chans.values():
            if len(q) > b.max_qlen:
                return False
        return True

    # ------------------------------------------------------------- transitions

    def successors(self, s):
        """Yield (event, successor) in a fixed deterministic order."""
        mem, sbuf, status, rfwd, wfwd, fcount, bops, prevkv, curkv, chans = s
        out = []
        client = self.client
        tail = self.chain[-1]
        head = self.chain[0]
        max_qlen = self.cfg.bounds.max_qlen
        chan_items = sorted(chans.items())

        def with_chans(newchans):
            return (mem, sbuf, status, rfwd, wfwd, fcount, bops, prevkv, curkv, newchans)

        def send(chans_, src, dst, msg):
            nc = dict(chans_)
            nc[(src, dst)] = nc.get((src, dst), ()) + (msg,)
            return nc

        # ClientSend: a read to the tail, or any write value to the head.
        # A send onto a full queue changes nothing an invariant can see and
        # would never be expanded, so it is not generated at all.
        if len(chans.get((client, tail), ())) < max_qlen:
            for key in self.keys:
                msg = (READ, key, 0, 0, (tail,))
                out.append(
                    (("client_send", "read", key), with_chans(send(chans, client, tail, msg)))
                )
        if len(chans.get((client, head), ())) < max_qlen:
            for key in self.keys:
                for val in self.values:
                    msg = (WRITE, key, val, 0, self.chain)
                    out.append(
                        (
                            ("client_send", "write", key, val),
                            with_chans(send(chans, client, head, msg)),
                        )
                    )

        # ClientRcv: consume the head of any switch->client buffer.
        for (src, dst), q in chan_items:
            if dst != client or not q:
                continue
            m = q[0]
            nc = dict(chans)
            rest = q[1:]
            if rest:
                nc[(src, dst)] = rest
            else:
                del nc[(src, dst)]
            if m[0] == REPLY:
                nprev = list(curkv)
                ncur = list(curkv)
                ncur[2 * m[1]] = m[2]
                ncur[2 * m[1] + 1] = m[3]
            else:
                nprev, ncur = prevkv, curkv
            out.append(
                (
                    ("client_recv", src),
                    (mem, sbuf, status, rfwd, wfwd, fcount, bops, nprev, ncur, nc),
                )
            )

        # SwitchStep: pop a channel head into a switch and process it in one
        # atomic action.  The split receive/process of the concrete model
        # inserts intermediate states whose memory and observed KVs equal
        # their predecessor's, and the inbox residency only delays the same
        # processing, so fusing preserves every configuration the invariants
        # can distinguish while removing the inbox dimension entirely.
        for (src, dst), q in chan_items:
            if dst == client or not q:
                continue
            nc = dict(chans)
            rest = q[1:]
            if rest:
                nc[(src, dst)] = rest
            else:
                del nc[(src, dst)]
            base = (mem, sbuf, status, rfwd, wfwd, fcount, bops, prevkv, curkv)
            for event, succ in self._proc(base, nc, dst, q[0]):
                out.append((("switch_step", src, dst), succ))

        # BufOp: drop, repeat, or reorder the head of a nonempty buffer.
        # Only switch-to-switch channels are adversarial; the client legs
        # are covered by retries and reply dedup in the concrete protocol.
        for (src, dst), q in chan_items:
            if not q or src == client or dst == client:
                continue
            variants = [("drop", q[1:])]
            if len(q) < max_qlen:  # an over-bound repeat is invariant-inert
                variants.append(("repeat", q + (q[0],)))
            if len(q) > 1:  # reordering a singleton only burns adversary budget
                variants.append(("reorder", q[1:] + (q[0],)))
            for name, nq in variants:
                nc = dict(chans)
                if nq:
                    nc[(src, dst)] = nq
                else:
                    del nc[(src, dst)]
                out.append(
                    (
                        ("buf_op", name, src, dst),
                        (mem, sbuf, status, rfwd, wfwd, fcount, bops + 1, prevkv, curkv, nc),
                    )
                )

        # SwitchFail: take down an alive chain member; in-flight traffic to
        # and from it is lost and its forward hops are set.
        for sw in self.chain:
            if status[sw] != ALIVE:
                continue
            nstatus = list(status)
            nstatus[sw] = FAILED
            nrfwd = list(rfwd)
            nwfwd = list(wfwd)
            nrfwd[sw] = self._prev_in_chain(sw)
            nwfwd[sw] = self._next_in_chain(sw)
            nbuf = list(sbuf)
            nbuf[sw] = None
            nc = {
                pair: q
                for pair, q in chans.items()
                if pair[0] != sw and pair[1] != sw
            }
            out.append(
                (
                    ("switch_fail", sw),
                    (mem, nbuf, nstatus, nrfwd, nwfwd, fcount + 1, bops, prevkv, curkv, nc),
                )
            )

        # SwitchRecovery: copy a live neighbor's memory onto a fresh spare
        # and point the failed switch's forwards at it.
        spares = [
            x
            for x in range(self.n)
            if x not in self.chain and x not in wfwd
        ]
        for sw in self.chain:
            if status[sw] != FAILED or not spares:
                continue
            new = spares[0]
            if sw == tail:
                ref = self._prev_alive(status, wfwd, sw)
            else:
                ref = self._next_alive(status, wfwd, sw)
            if ref == client:
                continue
            k = self.cfg.keys
            nmem = list(mem)
            if not self.cfg.mutations.activate_before_sync:
                nmem[new * k * 2 : (new + 1) * k * 2] = mem[ref * k * 2 : (ref + 1) * k * 2]
            nstatus = list(status)
            nstatus[sw] = RECOVERED
            nrfwd = list(rfwd)
            nwfwd = list(wfwd)
            nrfwd[sw] = new
            nwfwd[sw] = new
            nbuf = list(sbuf)
            nbuf[sw] = None
            nbuf[ref] = None
            cleared = {sw, ref}
            nc = {
                pair: q
                for pair, q in chans.items()
                if pair[0] not in cleared and pair[1] not in cleared
            }
            out.append(
                (
                    ("switch_recover", sw),
                    (nmem, nbuf, nstatus, nrfwd, nwfwd, fcount, bops, prevkv, curkv, nc),
                )
            )
        return out

    def _next_in_chain(self, sw: int) -> int:
        idx = self.chain.index(sw)
        return self.chain[idx + 1] if idx + 1 < len(self.chain) else self.client

    def _prev_in_chain(self, sw: int) -> int:
        idx = self.chain.index(sw)
        return self.chain[idx - 1] if idx > 0 else self.client

    def _proc(self, base, chans, sw: int, m):
        """Successors for one switch handling its inbox message."""
        mem, sbuf, status, rfwd, wfwd, fcount, bops, prevkv, curkv = base
        client = self.client
        k = self.cfg.keys
        op, key, val, ver, hops = m
        results = []

        def send(src, dst, msg):
            nc = dict(chans)
            nc[(src, dst)] = nc.get((src, dst), ()) + (msg,)
            return nc

        def state(nmem, nc):
            return (nmem, sbuf, status, rfwd, wfwd, fcount, bops, prevkv, curkv, nc)

        if status[sw] == ALIVE:
            if op == READ:
                reply = (REPLY, key, mem[(sw * k + key) * 2], mem[(sw * k + key) * 2 + 1], ())
                results.append((("switch_proc", sw), state(mem, send(sw, client, reply))))
            elif op == WRITE:
                stored_ver = mem[(sw * k + key) * 2 + 1]
                new_ver = stored_ver + 1 if ver == 0 else ver
                if new_ver > stored_ver or self.cfg.mutations.disable_seq_guard:
                    nmem = list(mem)
                    nmem[(sw * k + key) * 2] = val
                    nmem[(sw * k + key) * 2 + 1] = new_ver
                    if len(hops) > 1:
                        fwd = (WRITE, key, val, new_ver, hops[1:])
                        nc = send(sw, hops[1], fwd)
                    else:
                        nc = send(sw, client, (REPLY, key, val, new_ver, ()))
                    results.append((("switch_proc", sw), state(nmem, nc)))
                else:
                    results.append((("switch_proc", sw), state(mem, dict(chans))))
            else:  # stray reply at a switch: consumed
                results.append((("switch_proc", sw), state(mem, dict(chans))))
            return results

        # Failed or recovered: forward instead of processing.
        if op == READ:
            target = rfwd[sw]
            if target == client:
                results.append((("switch_proc", sw), state(mem, dict(chans))))
            else:
                results.append((("switch_proc", sw), state(mem, send(sw, target, m))))
        elif op == WRITE:
            if status[sw] == RECOVERED:
                results.append(
                    (("switch_proc", sw), state(mem, send(sw, wfwd[sw], m)))
                )
            elif wfwd[sw] != client:
                fwd = (WRITE, key, val, ver, hops[1:])
                results.append(
                    (("switch_proc", sw), state(mem, send(sw, wfwd[sw], fwd)))
                )
            else:
                # Failed tail with nowhere to forward: the write is lost.
                results.append((("switch_proc", sw), state(mem, dict(chans))))
        else:
            results.append((("switch_proc", sw), state(mem, dict(chans))))
        return results


def explore(cfg: ExploreConfig) -> ExploreResult:
    model = _Model(cfg)
    symmetry = cfg.symmetry and not cfg.trace
    init = model.initial()
    init_bytes = model.encode(init)
    bad = model.check(init)
    if bad is not None:
        return ExploreResult(
            ok=False, states=1, transitions=0, depth=0,
            violation=bad[0], detail=bad[1], trace=[],
        )
    visited = {hash(init_bytes)}
    frontier = deque([init_bytes])
    parents: dict[int, tuple[int, tuple]] = {} if cfg.trace else None
    states = 1
    transitions = 0
    depth = 0
    capped = False
    progress = cfg.progress

    while frontier:
        if progress is not None:
            progress(depth, states, transitions, len(frontier))
        if states >= cfg.state_cap:
            capped = True
            break
        next_frontier = deque()
        depth += 1
        while frontier:
            cur_bytes = frontier.popleft()
            cur = model.decode(cur_bytes)
            cur_fp = hash(cur_bytes)
            for event, succ in model.successors(cur):
                transitions += 1
                if symmetry:
                    succ = model.canonicalize(succ)
                succ_bytes = model.encode(succ)
                fp = hash(succ_bytes)
                if fp in visited:
                    continue
                visited.add(fp)
                states += 1
                if parents is not None:
                    parents[fp] = (cur_fp, event)
                bad = model.check(succ)
                if bad is not None:
                    trace = _rebuild_trace(parents, fp) if parents is not None else None
                    return ExploreResult(
                        ok=False,
                        states=states,
                        transitions=transitions,
                        depth=depth,
                        violation=bad[0],
                        detail=bad[1],
                        trace=trace,
                    )
                if model.within_bounds(succ):
                    next_frontier.append(succ_bytes)
            if states >= cfg.state_cap:
                capped = True
                break
        frontier = next_frontier

    return ExploreResult(
        ok=True, states=states, transitions=transitions, depth=depth, capped=capped
    )


def _rebuild_trace(parents: dict, fp: int) -> list[tuple]:
    trace = []
    while fp in parents:
        fp, event = parents[fp]
        trace.append(event)
    trace.reverse()
    return trace


def replay(cfg: ExploreConfig, trace: list[tuple]) -> ExploreResult:
    """Re-execute a counterexample trace from the initial state; returns the
    violation it ends in (ok=True means the trace no longer violates)."""
    model = _Model(cfg)
    cur = model.initial()
    for step, event in enumerate(trace):
        match = None
        for ev, succ in model.successors(cur):
            if ev == event:
                match = succ
                break
        if match is None:
            raise ExploreError(f"trace step {step}: event {event} not enabled")
        cur = match
        bad = model.check(cur)
        if bad is not None:
            return ExploreResult(
                ok=False,
                states=step + 1,
                transitions=step + 1,
                depth=step + 1,
                violation=bad[0],
                detail=bad[1],
                trace=trace[: step + 1],
            )
    return ExploreResult(ok=True, states=len(trace), transitions=len(trace), depth=len(trace))
