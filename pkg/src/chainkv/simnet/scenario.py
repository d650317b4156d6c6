"""Scenario configuration for simulator runs.

Scenarios serialize to a versioned JSON document (docs/scenario.md) naming
the topology, ring parameters, channel behavior, workload mix, and fault
schedule.  Any field left out takes the default below.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional

SCENARIO_VERSION = 1


class ScenarioError(Exception):
    pass


@dataclass
class FaultEvent:
    t_us: int
    kind: str  # fail | failover | recover
    ip: str
    new_ip: Optional[str] = None


@dataclass
class ScenarioConfig:
    switches: list[str] = field(
        default_factory=lambda: ["10.0.0.1", "10.0.0.2", "10.0.0.3", "10.0.0.4"]
    )
    # Standby switches are in the topology but own no ring segments until
    # recovery reassigns a failed switch's virtual nodes to them.
    standby: list[str] = field(default_factory=list)
    # Physical adjacency; None means full mesh over the switches.
    adjacency: Optional[dict[str, list[str]]] = None
    m: int = 16
    f: int = 2
    groups: int = 1
    ring_seed: int = 1
    # Force every chain into this switch order (testbed-style pinning);
    # requires the ring to put the same switch set in every chain.
    pin_chain_order: Optional[list[str]] = None

    delay_us: int = 10
    jitter_us: int = 5
    loss: float = 0.0
    dup: float = 0.0
    reorder: float = 0.0
    reorder_extra_us: int = 40

    ops: int = 1000
    write_ratio: float = 0.5
    value_size: int = 16
    key_count: int = 16
    clients: int = 4
    client_attach: Optional[list[str]] = None
    timeout_us: int = 10_000
    max_retries: int = 5
    open_loop: bool = False
    open_loop_interval_us: int = 50

    faults: list[FaultEvent] = field(default_factory=list)
    recovery_step_us: int = 200
    stop_dwell_us: int = 0  # extra dwell between stop and sync (measurement)

    def validate(self) -> None:
        for name in ("loss", "dup", "reorder", "write_ratio"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ScenarioError(f"{name} must be in [0, 1], got {v}")
        if len(self.ring_switches()) < self.f + 1:
            raise ScenarioError("fewer ring switches than chain length f+1")
        for sw in self.standby:
            if sw not in self.switches:
                raise ScenarioError(f"standby {sw} not in switches")
        if self.value_size > 128:
            raise ScenarioError("value_size exceeds 128")
        if self.ops < 0 or self.clients < 1 or self.key_count < 1:
            raise ScenarioError("ops, clients, key_count must be positive")
        failed = set()
        for ev in self.faults:
            if ev.kind == "fail":
                failed.add(ev.ip)
            if ev.kind not in ("fail", "failover", "recover"):
                raise ScenarioError(f"unknown fault kind {ev.kind}")
        if len(failed) > self.f:
            raise ScenarioError(
                f"{len(failed)} scheduled failures exceed tolerance f={self.f}"
            )

    def ring_switches(self) -> list[str]:
        return [sw for sw in self.switches if sw not in self.standby]

    def dumps(self) -> str:
        doc = asdict(self)
        doc["version"] = SCENARIO_VERSION
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"

    @classmethod
    def loads(cls, text: str) -> "ScenarioConfig":
        doc = json.loads(text)
        version = doc.pop("version", SCENARIO_VERSION)
        if version != SCENARIO_VERSION:
            raise ScenarioError(f"unsupported scenario version {version}")
        faults = [FaultEvent(**ev) for ev in doc.pop("faults", [])]
        cfg = cls(**doc, faults=faults)
        cfg.validate()
        return cfg
