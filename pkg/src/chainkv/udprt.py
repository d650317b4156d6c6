"""Real-network backend: switches, the controller, and clients run as OS
processes exchanging wire-format payloads over UDP.

Each datagram carries an 8-byte underlay pseudo-header (logical source and
destination IPv4, the stand-in for the IP header a hardware deployment
would use) followed by the exact wire payload.  Data packets travel the
physical topology one process hop at a time so that a failed switch's
neighbors see, and can intercept, traffic addressed to it; replies to
clients are sent directly.

Every switch runs one serial loop over its UDP data socket and a
line-oriented TCP admin socket (controller commands).  The controller
serves the same line protocol on its own admin port and reaches switches
through persistent TCP connections.  See docs/protocol.md.
"""

from __future__ import annotations

import base64
import json
import selectors
import socket
import struct
import time
from dataclasses import dataclass, field
from typing import Optional

from . import dataplane
from .client import Agent, AgentConfig
from .control import Controller, Topology, UnknownSwitch
from .dataplane import FailoverRule, RuleMode, StopRule, SwitchState, SwitchStatus
from .placement import Ring, build_ring, group_of_key
from .store import KVStore, StoreImage
from .wire import OpCode, Packet, decode, encode, ip_to_u32, u32_to_ip

_ENV = struct.Struct("!II")  # logical src, logical dst

DATA_PORT = 50000
ADMIN_PORT = 50100


class RuntimeError_(Exception):
    pass


@dataclass
class ClusterSpec:
    """Deployment manifest: every node's identity plus ring parameters.
    On loopback, give each node its own 127.x address; all nodes share the
    data/admin ports."""

    switches: list[str]
    controller: str
    m: int = 16
    f: int = 2
    groups: int = 1
    seed: int = 1
    standby: list[str] = field(default_factory=list)
    adjacency: Optional[dict[str, list[str]]] = None
    data_port: int = DATA_PORT
    admin_port: int = ADMIN_PORT

    def ring_switches(self) -> list[str]:
        return [sw for sw in self.switches if sw not in self.standby]

    def ring(self) -> Ring:
        return build_ring(self.ring_switches(), self.m, self.f, self.groups, self.seed)

    def topology(self) -> Topology:
        adj: dict[str, set[str]] = {ip: set() for ip in self.switches}
        if self.adjacency:
            for a, peers in self.adjacency.items():
                for b in peers:
                    adj.setdefault(a, set()).add(b)
                    adj.setdefault(b, set()).add(a)
        else:
            for a in self.switches:
                for b in self.switches:
                    if a != b:
                        adj[a].add(b)
        adj[self.controller] = set(self.switches)
        for ip in self.switches:
            adj[ip].add(self.controller)
        return Topology(adj, set(self.switches))

    def dumps(self) -> str:
        doc = {
            "version": 1,
            "switches": self.switches,
            "controller": self.controller,
            "m": self.m,
            "f": self.f,
            "groups": self.groups,
            "seed": self.seed,
            "standby": self.standby,
            "adjacency": self.adjacency,
            "data_port": self.data_port,
            "admin_port": self.admin_port,
        }
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"

    @classmethod
    def loads(cls, text: str) -> "ClusterSpec":
        doc = json.loads(text)
        doc.pop("version", None)
        return cls(**doc)

    @classmethod
    def load(cls, path: str) -> "ClusterSpec":
        with open(path) as fh:
            return cls.loads(fh.read())


def frame(src: str, dst: str, pkt: Packet) -> bytes:
    return _ENV.pack(ip_to_u32(src), ip_to_u32(dst)) + encode(pkt)


def unframe(datagram: bytes) -> tuple[str, str, Packet]:
    src, dst = _ENV.unpack_from(datagram, 0)
    return u32_to_ip(src), u32_to_ip(dst), decode(datagram[_ENV.size :])


# --------------------------------------------------------------------- switch


class SwitchProcess:
    """One switch: serial receive -> process/intercept/forward -> send loop,
    plus a TCP admin listener for controller commands."""

    def __init__(self, ip: str, spec: ClusterSpec):
        self.ip = ip
        self.spec = spec
        self.ring = spec.ring()
        self.topology = spec.topology()
        self.state = SwitchState(
            ip=ip,
            store=KVStore(),
            controller_ip=spec.controller,
            group_of=lambda key: group_of_key(self.ring, key),
        )
        self.running = True
        self._busy = False
        self.data_sock: Optional[socket.socket] = None
        self.admin_sock: Optional[socket.socket] = None

    # --------------------------------------------------------------- plumbing

    def _bind(self) -> None:
        self.data_sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.data_sock.bind((self.ip, self.spec.data_port))
        self.data_sock.setblocking(False)
        self.admin_sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self.admin_sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self.admin_sock.bind((self.ip, self.spec.admin_port))
        self.admin_sock.listen(8)
        self.admin_sock.setblocking(False)

    def _send(self, src: str, dst: str, pkt: Packet) -> None:
        """Send toward the logical destination: switch-bound packets take
        one underlay hop; client/controller-bound packets go direct."""
        if dst in self.topology.switches:
            hop = self.topology.next_hop(self.ip, dst) if dst != self.ip else None
            if hop is None:
                return
            addr = (hop, self.spec.data_port)
        else:
            addr = (dst, self.spec.data_port)
        self.data_sock.sendto(frame(src, dst, pkt), addr)

    def _handle_datagram(self, datagram: bytes) -> None:
        assert not self._busy, "switch loop must be serial"
        self._busy = True
        try:
            src, dst, pkt = unframe(datagram)
            if dst == self.ip:
                chain = self._base_chain(pkt.key)
                is_head = bool(chain) and chain[0] == self.ip
                is_tail = bool(chain) and chain[-1] == self.ip
                for ndst, npkt in dataplane.process(self.state, pkt, is_head, is_tail):
                    self._send(src if npkt.op != OpCode.REPLY else self.ip, ndst, npkt)
            elif dst in self.state.rules:
                for ndst, npkt in dataplane.intercept(self.state, pkt, dst):
                    self._send(src, ndst, npkt)
            else:
                self._send(src, dst, pkt)  # transit: keep routing
        finally:
            self._busy = False

    def _base_chain(self, key: bytes) -> tuple[str, ...]:
        return self.ring.chain_for_segment(self.ring.segment_of_key(key))

    # ------------------------------------------------------------------ admin

    def handle_admin(self, line: str) -> str:
        try:
            parts = line.strip().split()
            if not parts:
                return "ERR empty"
            cmd, args = parts[0], parts[1:]
            fn = getattr(self, f"_admin_{cmd.replace('-', '_')}", None)
            if fn is None:
                return f"ERR unknown command {cmd}"
            return fn(args)
        except Exception as exc:
            return f"ERR {exc}"

    def _admin_ping(self, args) -> str:
        return "OK"

    def _admin_install_rule(self, args) -> str:
        dst, mode = args[0], args[1]
        prio = int(args[2])
        if mode == "bypass":
            rule = FailoverRule(match_dst=dst, mode=RuleMode.BYPASS, priority=prio)
        else:
            target = args[3]
            groups = None
            if len(args) > 4 and args[4] != "*":
                groups = frozenset(int(g) for g in args[4].split(","))
            rule = FailoverRule(
                match_dst=dst,
                mode=RuleMode.REDIRECT,
                priority=prio,
                target=target,
                groups=groups,
            )
        dataplane.install_rule(self.state, rule)
        return "OK"

    def _admin_remove_rule(self, args) -> str:
        dataplane.remove_rule(self.state, args[0])
        return "OK"

    def _admin_set_stop(self, args) -> str:
        dst = args[0]
        groups = None if args[1] == "*" else frozenset(int(g) for g in args[1].split(","))
        hold_reads = args[2] == "1"
        dataplane.set_stop(self.state, dst, StopRule(groups=groups, hold_reads=hold_reads))
        return "OK"

    def _admin_clear_stop(self, args) -> str:
        dst = args[0]
        released = dataplane.clear_stop(self.state, dst)
        for pkt in released:
            if dst in self.state.rules:
                for ndst, npkt in dataplane.intercept(self.state, pkt, dst):
                    self._send(self.ip, ndst, npkt)
        return f"OK {len(released)}"

    def _admin_set_status(self, args) -> str:
        status = SwitchStatus(args[0])
        wfwd = args[1] if len(args) > 1 else None
        rfwd = args[2] if len(args) > 2 else None
        dataplane.set_status(self.state, status, wfwd, rfwd)
        return "OK"

    def _admin_bump_session(self, args) -> str:
        dataplane.bump_session(self.state, int(args[0]))
        return "OK"

    def _admin_snapshot(self, args) -> str:
        keys = None
        if args and args[0] != "*":
            keys = [bytes.fromhex(k) for k in args[0].split(",")]
        image = self.state.store.snapshot(keys)
        return "OK " + base64.b64encode(image.to_bytes()).decode()

    def _admin_apply_image(self, args) -> str:
        image = StoreImage.from_bytes(base64.b64decode(args[0]))
        count = self.state.store.apply_entries(image)
        return f"OK {count}"

    def _admin_insert(self, args) -> str:
        value = bytes.fromhex(args[1]) if len(args) > 1 else b""
        self.state.store.insert_index(bytes.fromhex(args[0]), value)
        return "OK"

    def _admin_tombstone(self, args) -> str:
        key = bytes.fromhex(args[0])
        self.state.store.tombstone(self.state.store.lookup(key))
        return "OK"

    def _admin_gc(self, args) -> str:
        self.state.store.gc(bytes.fromhex(args[0]))
        return "OK"

    def _admin_set_owners(self, args) -> str:
        owners = args[0].split(",")
        self.ring = self.ring.with_owners(dict(enumerate(owners)))
        return "OK"

    def _admin_counters(self, args) -> str:
        return "OK " + json.dumps(self.state.counters, sort_keys=True)

    def _admin_shutdown(self, args) -> str:
        self.running = False
        return "OK"

    # -------------------------------------------------------------------- run

    def run(self) -> None:
        self._bind()
        sel = selectors.DefaultSelector()
        sel.register(self.data_sock, selectors.EVENT_READ, "data")
        sel.register(self.admin_sock, selectors.EVENT_READ, "accept")
        buffers: dict[socket.socket, bytes] = {}
        try:
            while self.running:
                for key, _ in sel.select(timeout=0.2):
                    if key.data == "data":
                        try:
                            datagram, _ = self.data_sock.recvfrom(65535)
                        except BlockingIOError:
                            continue
                        try:
                            self._handle_datagram(datagram)
                        except Exception:
                            self.state.count("datagram_error")
                    elif key.data == "accept":
                        conn, _ = self.admin_sock.accept()
                        conn.setblocking(False)
                        buffers[conn] = b""
                        sel.register(conn, selectors.EVENT_READ, "admin")
                    else:
                        conn = key.fileobj
                        try:
                            chunk = conn.recv(65536)
                        except (BlockingIOError, ConnectionResetError):
                            continue
                        if not chunk:
                            sel.unregister(conn)
                            conn.close()
                            buffers.pop(conn, None)
                            continue
                        buffers[conn] += chunk
                        while b"\n" in buffers[conn]:
                            line, buffers[conn] = buffers[conn].split(b"\n", 1)
                            reply = self.handle_admin(line.decode())
                            try:
                                conn.sendall(reply.encode() + b"\n")
                            except OSError:
                                pass
        finally:
            sel.close()
            self.data_sock.close()
            self.admin_sock.close()


# ----------------------------------------------------------------- controller


class _TcpSwitchAdmin:
    """Admin handle speaking the switch line protocol over TCP."""

    def __init__(self, ip: str, port: int):
        self.ip = ip
        self.port = port
        self._sock: Optional[socket.socket] = None
        self._buf = b""

    def _connect(self) -> socket.socket:
        if self._sock is None:
            self._sock = socket.create_connection((self.ip, self.port), timeout=5.0)
        return self._sock

    def _cmd(self, line: str) -> str:
        sock = self._connect()
        try:
            sock.sendall(line.encode() + b"\n")
            while b"\n" not in self._buf:
                chunk = sock.recv(65536)
                if not chunk:
                    raise ConnectionError("admin connection closed")
                self._buf += chunk
        except OSError:
            self._sock = None
            raise
        reply, self._buf = self._buf.split(b"\n", 1)
        text = reply.decode()
        if not text.startswith("OK"):
            raise RuntimeError_(f"{self.ip}: {text}")
        return text[3:] if len(text) > 3 else ""

    def install_rule(self, rule: FailoverRule) -> None:
        if rule.mode == RuleMode.BYPASS:
            self._cmd(f"install-rule {rule.match_dst} bypass {rule.priority}")
        else:
            groups = "*" if rule.groups is None else ",".join(map(str, sorted(rule.groups)))
            self._cmd(
                f"install-rule {rule.match_dst} redirect {rule.priority} "
                f"{rule.target} {groups}"
            )

    def remove_rule(self, dst: str) -> None:
        self._cmd(f"remove-rule {dst}")

    def set_stop(self, dst: str, stop: StopRule) -> None:
        groups = "*" if stop.groups is None else ",".join(map(str, sorted(stop.groups)))
        self._cmd(f"set-stop {dst} {groups} {1 if stop.hold_reads else 0}")

    def clear_stop(self, dst: str) -> None:
        self._cmd(f"clear-stop {dst}")

    def set_status(self, status, write_fwd=None, read_fwd=None) -> None:
        line = f"set-status {status.value}"
        if write_fwd:
            line += f" {write_fwd} {read_fwd or write_fwd}"
        self._cmd(line)

    def bump_session(self, session: int) -> None:
        self._cmd(f"bump-session {session}")

    def snapshot(self, keys=None) -> StoreImage:
        arg = "*" if keys is None else ",".join(k.hex() for k in keys)
        out = self._cmd(f"snapshot {arg}")
        return StoreImage.from_bytes(base64.b64decode(out))

    def apply_entries(self, image: StoreImage) -> int:
        out = self._cmd("apply-image " + base64.b64encode(image.to_bytes()).decode())
        return int(out)

    def insert(self, key: bytes, value: bytes) -> None:
        self._cmd(f"insert {key.hex()} {value.hex()}")

    def tombstone(self, key: bytes) -> None:
        self._cmd(f"tombstone {key.hex()}")

    def gc(self, key: bytes) -> None:
        self._cmd(f"gc {key.hex()}")

    def set_owners(self, owners) -> None:
        self._cmd("set-owners " + ",".join(owners))

    def counters(self) -> dict:
        return json.loads(self._cmd("counters"))

    def close(self) -> None:
        if self._sock is not None:
            self._sock.close()
            self._sock = None


class ControllerProcess:
    """Controller: TCP admin commands in, switch admin connections out,
    plus a UDP mailbox for INSERT/DELETE forwarded by the data plane."""

    def __init__(self, spec: ClusterSpec):
        self.spec = spec
        self._handles: dict[str, _TcpSwitchAdmin] = {}
        self.controller = Controller(
            spec.ring(),
            spec.topology(),
            bus=self._bus,
            controller_ip=spec.controller,
            standby=spec.standby,
        )
        self.running = True

    def _bus(self, ip: str):
        if self.controller.statuses.get(ip) == SwitchStatus.FAILED:
            return None
        handle = self._handles.get(ip)
        if handle is None:
            handle = _TcpSwitchAdmin(ip, self.spec.admin_port)
            self._handles[ip] = handle
        return handle

    def _mailbox(self, datagram: bytes, data_sock: socket.socket) -> None:
        from .wire import FLAG_NOT_FOUND

        try:
            _, dst, pkt = unframe(datagram)
        except Exception:
            return
        ctrl = self.controller
        flags = 0
        try:
            if pkt.op == OpCode.INSERT:
                if pkt.key not in ctrl.keys:
                    ctrl.admin_insert(pkt.key, pkt.value)
            elif pkt.op == OpCode.DELETE:
                if pkt.key in ctrl.keys:
                    ctrl.admin_delete(pkt.key)
                else:
                    flags = FLAG_NOT_FOUND
            else:
                return
        except Exception:
            return
        client = u32_to_ip(pkt.client_id)
        reply = Packet(
            op=OpCode.REPLY,
            key=pkt.key,
            client_id=pkt.client_id,
            req_id=pkt.req_id,
            flags=flags,
        )
        data_sock.sendto(
            frame(self.spec.controller, client, reply), (client, self.spec.data_port)
        )

    def run(self) -> None:
        ip = self.spec.controller
        data_sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        data_sock.bind((ip, self.spec.data_port))
        data_sock.setblocking(False)
        admin = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        admin.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        admin.bind((ip, self.spec.admin_port))
        admin.listen(8)
        admin.setblocking(False)
        sel = selectors.DefaultSelector()
        sel.register(data_sock, selectors.EVENT_READ, "data")
        sel.register(admin, selectors.EVENT_READ, "accept")
        buffers: dict[socket.socket, bytes] = {}
        try:
            while self.running:
                for key, _ in sel.select(timeout=0.2):
                    if key.data == "data":
                        try:
                            datagram, _ = data_sock.recvfrom(65535)
                        except BlockingIOError:
                            continue
                        self._mailbox(datagram, data_sock)
                    elif key.data == "accept":
                        conn, _ = admin.accept()
                        conn.setblocking(False)
                        buffers[conn] = b""
                        sel.register(conn, selectors.EVENT_READ, "admin")
                    else:
                        conn = key.fileobj
                        try:
                            chunk = conn.recv(65536)
                        except (BlockingIOError, ConnectionResetError):
                            continue
                        if not chunk:
                            sel.unregister(conn)
                            conn.close()
                            buffers.pop(conn, None)
                            continue
                        buffers[conn] += chunk
                        while b"\n" in buffers[conn]:
                            line, buffers[conn] = buffers[conn].split(b"\n", 1)
                            text = line.decode()
                            if text.strip() == "shutdown":
                                self.running = False
                                reply = "OK"
                            else:
                                reply = self.controller.handle_command(text)
                            try:
                                conn.sendall(reply.encode() + b"\n")
                            except OSError:
                                pass
        finally:
            for handle in self._handles.values():
                handle.close()
            sel.close()
            data_sock.close()
            admin.close()


# -------------------------------------------------------------------- clients


class UdpTransport:
    """Client-side socket: sends enter the network at the attach switch."""

    def __init__(self, client_ip: str, attach: str, spec: ClusterSpec):
        self.client_ip = client_ip
        self.attach = attach
        self.spec = spec
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.bind((client_ip, spec.data_port))

    def send(self, dst: str, pkt: Packet) -> None:
        self.sock.sendto(
            frame(self.client_ip, dst, pkt), (self.attach, self.spec.data_port)
        )

    def recv(self, timeout_s: float) -> Optional[Packet]:
        self.sock.settimeout(max(timeout_s, 1e-4))
        try:
            datagram, _ = self.sock.recvfrom(65535)
        except socket.timeout:
            return None
        try:
            _, _, pkt = unframe(datagram)
        except Exception:
            return None
        return pkt

    def close(self) -> None:
        self.sock.close()


class SyncAgent:
    """Blocking key-value/lock API over UDP, one op at a time."""

    def __init__(
        self,
        client_ip: str,
        attach: str,
        spec: ClusterSpec,
        timeout_us: int = 100_000,
        max_retries: int = 5,
        ring: Optional[Ring] = None,
    ):
        self.transport = UdpTransport(client_ip, attach, spec)
        self.ring = ring or spec.ring()
        self.agent = Agent(
            ring_provider=lambda: self.ring,
            config=AgentConfig(
                client_ip=client_ip, timeout_us=timeout_us, max_retries=max_retries
            ),
        )

    def _now(self) -> int:
        return time.monotonic_ns() // 1000

    def _run(self, begin_fn, *args):
        emits = begin_fn(*args, self._now())
        for dst, pkt in emits:
            self.transport.send(dst, pkt)
        while True:
            deadline = self.agent.next_deadline()
            now = self._now()
            pkt = self.transport.recv(max(0.0, (deadline - now) / 1e6))
            now = self._now()
            if pkt is not None:
                result = self.agent.on_reply(pkt, now)
                if result is not None:
                    return result
                continue
            emits, timed_out = self.agent.on_tick(now)
            if timed_out is not None:
                return timed_out
            for dst, p in emits:
                self.transport.send(dst, p)

    def read(self, key: bytes):
        return self._run(self.agent.begin_read, key)

    def write(self, key: bytes, value: bytes):
        return self._run(self.agent.begin_write, key, value)

    def insert(self, key: bytes, value: bytes):
        return self._run(self.agent.begin_insert, key, value)

    def delete(self, key: bytes):
        return self._run(self.agent.begin_delete, key)

    def lock_acquire(self, key: bytes) -> bool:
        return self._run(self.agent.begin_lock_acquire, key).ok

    def lock_release(self, key: bytes) -> bool:
        return self._run(self.agent.begin_lock_release, key).ok

    def refresh_ring(self, ring: Ring) -> None:
        self.ring = ring

    def close(self) -> None:
        self.transport.close()


def admin_command(host: str, port: int, line: str, timeout_s: float = 10.0) -> str:
    """One-shot controller/switch admin command."""
    with socket.create_connection((host, port), timeout=timeout_s) as sock:
        sock.sendall(line.encode() + b"\n")
        buf = b""
        while b"\n" not in buf:
            chunk = sock.recv(65536)
            if not chunk:
                break
            buf += chunk
    return buf.split(b"\n", 1)[0].decode()


def run_switch(ip: str, spec: ClusterSpec) -> None:
    SwitchProcess(ip, spec).run()


def run_controller(spec: ClusterSpec) -> None:
    ControllerProcess(spec).run()
