"""Consistent-hashing partition of the key space into replication chains.

Each switch owns m/n virtual nodes placed on a 64-bit ring.  A key hashes to
a ring position; its chain is the next f+1 virtual nodes clockwise that lie
on pairwise-distinct switches, in ring order (closest node's owner is the
chain head).  Virtual nodes are numbered by ring rank and partitioned into G
virtual groups (group id = rank mod G) so recovery can proceed one group at
a time.

The placement hash is FNV-1a 64 over an 8-byte big-endian seed followed by
the input bytes; see docs/protocol.md.  It is fixed so that every process
sharing a ring manifest computes byte-identical placements.
"""

from __future__ import annotations

import json
from bisect import bisect_right
from dataclasses import dataclass, field

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF

MANIFEST_VERSION = 1


class PlacementError(Exception):
    pass


class TooFewSwitches(PlacementError):
    pass


def hash64(seed: int, data: bytes) -> int:
    """FNV-1a 64 over (8-byte big-endian seed || data), then the 64-bit
    avalanche finalizer (xor-shift/multiply twice); FNV alone disperses
    short, similar inputs too weakly for ring placement."""
    h = _FNV_OFFSET
    for b in seed.to_bytes(8, "big") + data:
        h = ((h ^ b) * _FNV_PRIME) & _MASK64
    h ^= h >> 33
    h = (h * 0xFF51AFD7ED558CCD) & _MASK64
    h ^= h >> 33
    h = (h * 0xC4CEB9FE1A85EC53) & _MASK64
    h ^= h >> 33
    return h


@dataclass(frozen=True)
class Ring:
    """Immutable ring; `owners[i]` is the switch currently owning virtual
    node i (ring rank order).  Reassignment after a failure produces a new
    Ring with the same positions and updated owners."""

    switches: tuple[str, ...]
    m: int
    f: int
    groups: int
    seed: int
    positions: tuple[int, ...]
    owners: tuple[str, ...]
    _chain_cache: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def chain_len(self) -> int:
        return self.f + 1

    def vnode_group(self, vid: int) -> int:
        return vid % self.groups

    def vnodes_of(self, switch: str) -> tuple[int, ...]:
        return tuple(i for i, o in enumerate(self.owners) if o == switch)

    def segment_of_key(self, key: bytes) -> int:
        """Rank of the virtual node immediately clockwise of the key."""
        h = hash64(self.seed, key)
        i = bisect_right(self.positions, h)
        return i % self.m

    def chain_for_segment(self, vid: int) -> tuple[str, ...]:
        cached = self._chain_cache.get(vid)
        if cached is not None:
            return cached
        chain = []
        seen = set()
        for step in range(self.m):
            owner = self.owners[(vid + step) % self.m]
            if owner not in seen:
                seen.add(owner)
                chain.append(owner)
                if len(chain) == self.chain_len:
                    break
        if len(chain) < self.chain_len:
            raise PlacementError(
                f"only {len(chain)} distinct switches on ring, need {self.chain_len}"
            )
        result = tuple(chain)
        self._chain_cache[vid] = result
        return result

    def with_owners(self, reassignment: dict[int, str]) -> "Ring":
        owners = list(self.owners)
        for vid, new_owner in reassignment.items():
            owners[vid] = new_owner
        return Ring(
            switches=self.switches,
            m=self.m,
            f=self.f,
            groups=self.groups,
            seed=self.seed,
            positions=self.positions,
            owners=tuple(owners),
        )


def build_ring(
    switches: list[str], m: int, f: int, groups: int = 1, seed: int = 0
) -> Ring:
    n = len(switches)
    if n < f + 1:
        raise TooFewSwitches(f"{n} switches cannot host chains of {f + 1}")
    if m < n:
        raise PlacementError(f"m={m} smaller than switch count {n}")
    if groups < 1:
        raise PlacementError("groups must be >= 1")
    # First m % n switches (input order) take the extra virtual node.
    base, extra = divmod(m, n)
    points = []
    for idx, sw in enumerate(switches):
        count = base + (1 if idx < extra else 0)
        for rep in range(count):
            pos = hash64(seed, f"{sw}#{rep}".encode())
            salt = 0
            while any(p == pos for p, _ in points):  # u64 collision, vanishingly rare
                salt += 1
                pos = hash64(seed, f"{sw}#{rep}!{salt}".encode())
            points.append((pos, sw))
    points.sort()
    return Ring(
        switches=tuple(switches),
        m=m,
        f=f,
        groups=groups,
        seed=seed,
        positions=tuple(p for p, _ in points),
        owners=tuple(o for _, o in points),
    )


def chain_for_key(ring: Ring, key: bytes) -> tuple[str, ...]:
    return ring.chain_for_segment(ring.segment_of_key(key))


def group_of_key(ring: Ring, key: bytes) -> int:
    return ring.vnode_group(ring.segment_of_key(key))


def keys_in_group(ring: Ring, gid: int, keys) -> set[bytes]:
    return {k for k in keys if group_of_key(ring, k) == gid}


def manifest_dumps(ring: Ring) -> str:
    doc = {
        "version": MANIFEST_VERSION,
        "switches": list(ring.switches),
        "m": ring.m,
        "f": ring.f,
        "groups": ring.groups,
        "seed": ring.seed,
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n"


def manifest_loads(text: str) -> Ring:
    doc = json.loads(text)
    if doc.get("version") != MANIFEST_VERSION:
        raise PlacementError(f"unsupported manifest version {doc.get('version')}")
    return build_ring(
        doc["switches"], doc["m"], doc["f"], doc.get("groups", 1), doc.get("seed", 0)
    )
