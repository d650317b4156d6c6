"""Command-line interface.

    chainkv sim run <scenario.json> --seed N [--out DIR]
    chainkv sim explore --bounds Q,F,V,B [--switches N --keys K --values V]
    chainkv net up <manifest.json>
    chainkv net switch --manifest M --ip IP        (one switch process)
    chainkv net controller --manifest M            (controller process)
    chainkv net bench --manifest M --clients C --write-ratio R
                      --value-size B --duration S
    chainkv net fail <ip> --manifest M
    chainkv net recover <ip> <new-ip> --manifest M
    chainkv check history <file>

Machine-readable CSV goes to stdout (and --out files); human summaries to
stderr.  Exit status is nonzero on any violation or failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import os
import signal
import subprocess
import sys
import time

from .client import history_loads
from .dataplane import Mutations
from .simnet import (
    ExploreBounds,
    ExploreConfig,
    ScenarioConfig,
    Simulation,
    check_consistency,
    explore,
)
from .simnet.explore import INVARIANTS
from .udprt import ClusterSpec, SyncAgent, admin_command


def _say(msg: str) -> None:
    print(msg, file=sys.stderr)


def _write_csv(rows: list[dict], path=None) -> None:
    if not rows:
        return
    out = io.StringIO()
    writer = csv.DictWriter(out, fieldnames=list(rows[0].keys()))
    writer.writeheader()
    writer.writerows(rows)
    text = out.getvalue()
    if path:
        with open(path, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


# ------------------------------------------------------------------------ sim


def cmd_sim_run(args) -> int:
    with open(args.scenario) as fh:
        scenario = ScenarioConfig.loads(fh.read())
    sim = Simulation(scenario, seed=args.seed)
    report = sim.run()
    rows = [
        {
            "seed": args.seed,
            "ops": scenario.ops,
            "completes": report.completed(),
            "timeouts": report.counters.get("timeouts", 0),
            "retries": report.counters.get("retries", 0),
            "qps": f"{report.qps():.1f}",
            "p50_us": report.percentile("read", 0.5) or report.percentile("write", 0.5),
            "p99_us": report.percentile("read", 0.99) or report.percentile("write", 0.99),
            "violations": len(report.violations),
        }
    ]
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write_csv(rows, os.path.join(args.out, "metrics.csv"))
        from .client import history_dumps

        with open(os.path.join(args.out, "history.log"), "w") as fh:
            fh.write(history_dumps(report.history))
        with open(os.path.join(args.out, "report.json"), "wb") as fh:
            fh.write(report.to_bytes())
    else:
        _write_csv(rows)
    for v in report.violations:
        _say(f"VIOLATION: {v}")
    _say(
        f"sim run: {report.completed()}/{scenario.ops} ops, "
        f"{len(report.violations)} violations"
    )
    return 1 if report.violations else 0


def cmd_sim_explore(args) -> int:
    q, f, v, b = (int(x) for x in args.bounds.split(","))
    mutations = Mutations()
    for name in args.mutation or []:
        if not hasattr(mutations, name):
            _say(f"unknown mutation {name}")
            return 2
        setattr(mutations, name, True)
    cfg = ExploreConfig(
        switches=args.switches,
        keys=args.keys,
        values=args.values,
        bounds=ExploreBounds(q, f, v, b),
        mutations=mutations,
        check=tuple(args.check) if args.check else INVARIANTS,
        state_cap=args.state_cap,
        trace=not args.no_trace,
    )
    t0 = time.time()
    result = explore(cfg)
    dt = time.time() - t0
    _write_csv(
        [
            {
                "states": result.states,
                "transitions": result.transitions,
                "depth": result.depth,
                "seconds": f"{dt:.1f}",
                "capped": int(result.capped),
                "violation": result.violation or "",
            }
        ]
    )
    if result.ok:
        if result.capped:
            _say(f"explore: state cap hit after {result.states} states (partial coverage)")
            return 3
        _say(f"explore: no violation in {result.states} states ({dt:.1f}s)")
        return 0
    _say(f"explore: {result.violation} violated: {result.detail}")
    if result.trace:
        for ev in result.trace:
            _say("  " + " ".join(str(x) for x in ev))
    return 1


# ------------------------------------------------------------------------ net


def cmd_net_switch(args) -> int:
    from .udprt import run_switch

    spec = ClusterSpec.load(args.manifest)
    run_switch(args.ip, spec)
    return 0


def cmd_net_controller(args) -> int:
    from .udprt import run_controller

    spec = ClusterSpec.load(args.manifest)
    run_controller(spec)
    return 0


def cmd_net_up(args) -> int:
    spec = ClusterSpec.load(args.manifest)
    procs = []
    try:
        for ip in spec.switches:
            procs.append(
                subprocess.Popen(
                    [sys.executable, "-m", "chainkv.cli", "net", "switch",
                     "--manifest", args.manifest, "--ip", ip]
                )
            )
        procs.append(
            subprocess.Popen(
                [sys.executable, "-m", "chainkv.cli", "net", "controller",
                 "--manifest", args.manifest]
            )
        )
        _say(f"cluster up: {len(spec.switches)} switches + controller; Ctrl-C stops")
        signal.sigwait({signal.SIGINT, signal.SIGTERM})
    finally:
        for p in procs:
            p.terminate()
        for p in procs:
            p.wait(timeout=5)
    return 0


def cmd_net_admin(args, line: str) -> int:
    spec = ClusterSpec.load(args.manifest)
    reply = admin_command(spec.controller, spec.admin_port, line)
    _say(reply)
    return 0 if reply.startswith("OK") else 1


def cmd_net_bench(args) -> int:
    import threading

    spec = ClusterSpec.load(args.manifest)
    attach = args.attach or spec.switches[0]
    keys = [f"bench-{i:04d}".encode().ljust(16, b"\x00") for i in range(args.keys)]
    seeder = SyncAgent(args.client_base, attach, spec)
    for key in keys:
        seeder.insert(key, b"\x00" * args.value_size)
    seeder.close()

    stop = time.monotonic() + args.duration
    lock = threading.Lock()
    stats = {"ops": 0, "timeouts": 0}
    lats: list[int] = []

    def worker(idx: int) -> None:
        import random as _random

        rng = _random.Random(1000 + idx)
        ip_parts = args.client_base.split(".")
        ip = ".".join(ip_parts[:3] + [str(int(ip_parts[3]) + 1 + idx)])
        agent = SyncAgent(ip, attach, spec)
        try:
            while time.monotonic() < stop:
                key = keys[rng.randrange(len(keys))]
                t0 = time.monotonic_ns()
                if rng.random() < args.write_ratio:
                    res = agent.write(key, rng.randbytes(args.value_size))
                else:
                    res = agent.read(key)
                dt_us = (time.monotonic_ns() - t0) // 1000
                with lock:
                    stats["ops"] += 1
                    if res.status == "timeout":
                        stats["timeouts"] += 1
                    else:
                        lats.append(dt_us)
        finally:
            agent.close()

    threads = [threading.Thread(target=worker, args=(i,)) for i in range(args.clients)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    lats.sort()

    def pct(q: float) -> int:
        return lats[min(len(lats) - 1, int(q * len(lats)))] if lats else 0

    completed = stats["ops"] - stats["timeouts"]
    rows = [
        {
            "clients": args.clients,
            "write_ratio": args.write_ratio,
            "value_size": args.value_size,
            "duration_s": args.duration,
            "ops": stats["ops"],
            "completed": completed,
            "timeouts": stats["timeouts"],
            "qps": f"{completed / max(args.duration, 1e-9):.1f}",
            "p50_us": pct(0.50),
            "p99_us": pct(0.99),
        }
    ]
    _write_csv(rows, args.out)
    _say(f"bench: {completed} completed, {stats['timeouts']} timeouts")
    return 0


# ---------------------------------------------------------------------- check


def cmd_check_history(args) -> int:
    with open(args.file) as fh:
        events = history_loads(fh.read())
    by_client: dict[int, list] = {}
    for e in events:
        by_client.setdefault(e.client_id, []).append(e)
    violations = []
    for cid in sorted(by_client):
        v = check_consistency(by_client[cid])
        if v is not None:
            violations.append(str(v))
    _write_csv(
        [
            {
                "events": len(events),
                "clients": len(by_client),
                "violations": len(violations),
            }
        ]
    )
    for v in violations:
        _say(f"VIOLATION: {v}")
    _say(f"check history: {len(events)} events, {len(violations)} violations")
    return 1 if violations else 0


# ----------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(prog="chainkv", description=__doc__)
    sub = top.add_subparsers(dest="cmd", required=True)

    sim = sub.add_parser("sim", help="deterministic simulator").add_subparsers(
        dest="sub", required=True
    )
    run_p = sim.add_parser("run", help="run a scenario file")
    run_p.add_argument("scenario")
    run_p.add_argument("--seed", type=int, default=1)
    run_p.add_argument("--out", default=None)
    run_p.set_defaults(fn=cmd_sim_run)

    exp = sim.add_parser("explore", help="bounded exhaustive exploration")
    exp.add_argument("--bounds", default="2,1,3,2", help="maxQLen,maxFailed,maxVersion,maxBufOps")
    exp.add_argument("--switches", type=int, default=4)
    exp.add_argument("--keys", type=int, default=1)
    exp.add_argument("--values", type=int, default=2)
    exp.add_argument("--mutation", action="append", default=None)
    exp.add_argument("--check", action="append", default=None)
    exp.add_argument("--state-cap", type=int, default=10_000_000)
    exp.add_argument("--no-trace", action="store_true")
    exp.set_defaults(fn=cmd_sim_explore)

    net = sub.add_parser("net", help="UDP runtime").add_subparsers(dest="sub", required=True)
    up = net.add_parser("up", help="start all cluster processes")
    up.add_argument("manifest")
    up.set_defaults(fn=cmd_net_up)

    swp = net.add_parser("switch", help="run one switch process")
    swp.add_argument("--manifest", required=True)
    swp.add_argument("--ip", required=True)
    swp.set_defaults(fn=cmd_net_switch)

    ctl = net.add_parser("controller", help="run the controller process")
    ctl.add_argument("--manifest", required=True)
    ctl.set_defaults(fn=cmd_net_controller)

    bench = net.add_parser("bench", help="closed-loop benchmark clients")
    bench.add_argument("--manifest", required=True)
    bench.add_argument("--clients", type=int, default=4)
    bench.add_argument("--write-ratio", type=float, default=0.5)
    bench.add_argument("--value-size", type=int, default=16)
    bench.add_argument("--duration", type=float, default=5.0)
    bench.add_argument("--keys", type=int, default=64)
    bench.add_argument("--attach", default=None)
    bench.add_argument("--client-base", default="127.0.2.1")
    bench.add_argument("--out", default=None)
    bench.set_defaults(fn=cmd_net_bench)

    fail = net.add_parser("fail", help="mark a switch failed and fail over")
    fail.add_argument("ip")
    fail.add_argument("--manifest", required=True)
    fail.set_defaults(fn=lambda a: _net_fail(a))

    rec = net.add_parser("recover", help="recover a failed switch onto a replacement")
    rec.add_argument("ip")
    rec.add_argument("new_ip")
    rec.add_argument("--manifest", required=True)
    rec.set_defaults(fn=lambda a: _net_recover(a))

    chk = sub.add_parser("check", help="offline checkers").add_subparsers(
        dest="sub", required=True
    )
    hist = chk.add_parser("history", help="check a history log for consistency")
    hist.add_argument("file")
    hist.set_defaults(fn=cmd_check_history)

    return top


def _net_fail(args) -> int:
    rc = cmd_net_admin(args, f"mark-failed {args.ip}")
    if rc != 0:
        return rc
    return cmd_net_admin(args, f"failover {args.ip}")


def _net_recover(args) -> int:
    return cmd_net_admin(args, f"recover {args.ip} {args.new_ip}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
