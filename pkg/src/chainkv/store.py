"""Per-switch key-value storage: an index table mapping 16-byte keys to slot
ids, plus parallel value / version / tombstone arrays sharing those slots.

DELETE is two-step: the data plane tombstones a slot (valid=False) and the
controller later garbage-collects it (index entry removed, slot freed).

Snapshot images serialize to a length-prefixed binary stream with the same
field widths as the wire format; see docs/snapshot.md.
"""

from __future__ import annotations

import heapq
import struct
from dataclasses import dataclass

from .wire import KEY_SIZE, MAX_VALUE

DEFAULT_CAPACITY = 65536

IMAGE_MAGIC = b"CKSNAP01"
_IMAGE_HEAD = struct.Struct("!8sII")  # magic, capacity, entry count
_ENTRY_HEAD = struct.Struct("!16sIHIBB")  # key, slot, session, seq, valid, val_len


class StoreError(Exception):
    pass


class NotFound(StoreError):
    pass


class StoreFull(StoreError):
    pass


class OutOfRange(StoreError):
    pass


class CapacityMismatch(StoreError):
    pass


@dataclass(frozen=True)
class ImageEntry:
    key: bytes
    slot: int
    session: int
    seq: int
    valid: bool
    value: bytes


@dataclass(frozen=True)
class StoreImage:
    capacity: int
    entries: tuple[ImageEntry, ...]

    def to_bytes(self) -> bytes:
        parts = [_IMAGE_HEAD.pack(IMAGE_MAGIC, self.capacity, len(self.entries))]
        for e in self.entries:
            parts.append(
                _ENTRY_HEAD.pack(
                    e.key, e.slot, e.session, e.seq, 1 if e.valid else 0, len(e.value)
                )
            )
            parts.append(e.value)
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "StoreImage":
        magic, capacity, count = _IMAGE_HEAD.unpack_from(buf, 0)
        if magic != IMAGE_MAGIC:
            raise StoreError(f"bad image magic {magic!r}")
        off = _IMAGE_HEAD.size
        entries = []
        for _ in range(count):
            key, slot, session, seq, valid, val_len = _ENTRY_HEAD.unpack_from(buf, off)
            off += _ENTRY_HEAD.size
            value = buf[off : off + val_len]
            off += val_len
            entries.append(ImageEntry(key, slot, session, seq, bool(valid), value))
        if off != len(buf):
            raise StoreError("trailing bytes after last image entry")
        return cls(capacity, tuple(entries))


class KVStore:
    """One switch's storage.  Owned by a single switch state machine and
    mutated only from its serial packet loop."""

    def __init__(self, capacity: int = DEFAULT_CAPACITY):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._index: dict[bytes, int] = {}
        self._values: dict[int, bytes] = {}
        self._sessions: dict[int, int] = {}
        self._seqs: dict[int, int] = {}
        self._valid: dict[int, bool] = {}
        # Slots never allocated yet are implicitly free above _next_slot;
        # explicitly freed slots are reused lowest-first.
        self._free: list[int] = []
        self._next_slot = 0

    def __len__(self) -> int:
        return len(self._index)

    def keys(self):
        return self._index.keys()

    def lookup(self, key: bytes) -> int:
        try:
            return self._index[key]
        except KeyError:
            raise NotFound(f"key {key.hex()} not indexed") from None

    def contains(self, key: bytes) -> bool:
        return key in self._index

    def insert_index(self, key: bytes, value: bytes) -> int:
        if len(key) != KEY_SIZE:
            raise ValueError(f"key must be {KEY_SIZE} bytes")
        if len(value) > MAX_VALUE:
            raise ValueError(f"value longer than {MAX_VALUE} bytes")
        if key in self._index:
            raise StoreError(f"key {key.hex()} already indexed")
        if self._free:
            loc = heapq.heappop(self._free)
        elif self._next_slot < self.capacity:
            loc = self._next_slot
            self._next_slot += 1
        else:
            raise StoreFull(f"all {self.capacity} slots in use")
        self._index[key] = loc
        self._values[loc] = value
        self._sessions[loc] = 0
        self._seqs[loc] = 0
        self._valid[loc] = True
        return loc

    def read_slot(self, loc: int) -> tuple[bytes, int, int, bool]:
        self._check(loc)
        return self._values[loc], self._sessions[loc], self._seqs[loc], self._valid[loc]

    def write_slot(self, loc: int, value: bytes, session: int, seq: int) -> None:
        self._check(loc)
        if len(value) > MAX_VALUE:
            raise ValueError(f"value longer than {MAX_VALUE} bytes")
        self._values[loc] = value
        self._sessions[loc] = session
        self._seqs[loc] = seq
        self._valid[loc] = True

    def version(self, loc: int) -> tuple[int, int]:
        self._check(loc)
        return self._sessions[loc], self._seqs[loc]

    def tombstone(self, loc: int) -> None:
        self._check(loc)
        self._valid[loc] = False

    def gc(self, key: bytes) -> None:
        loc = self.lookup(key)
        del self._index[key]
        del self._values[loc]
        del self._sessions[loc]
        del self._seqs[loc]
        del self._valid[loc]
        heapq.heappush(self._free, loc)

    def snapshot(self, keys=None) -> StoreImage:
        """Deep-copy image of the store, optionally restricted to `keys`."""
        if keys is None:
            items = self._index.items()
        else:
            wanted = set(keys)
            items = [(k, loc) for k, loc in self._index.items() if k in wanted]
        entries = tuple(
            ImageEntry(
                key=k,
                slot=loc,
                session=self._sessions[loc],
                seq=self._seqs[loc],
                valid=self._valid[loc],
                value=self._values[loc],
            )
            for k, loc in sorted(items, key=lambda kv: kv[1])
        )
        return StoreImage(self.capacity, entries)

    def load(self, image: StoreImage) -> None:
        """Replace all state with the image's."""
        if image.capacity != self.capacity:
            raise CapacityMismatch(
                f"image capacity {image.capacity} != store capacity {self.capacity}"
            )
        self._index.clear()
        self._values.clear()
        self._sessions.clear()
        self._seqs.clear()
        self._valid.clear()
        used = set()
        for e in image.entries:
            if e.slot >= self.capacity:
                raise CapacityMismatch(f"slot {e.slot} beyond capacity")
            self._index[e.key] = e.slot
            self._values[e.slot] = e.value
            self._sessions[e.slot] = e.session
            self._seqs[e.slot] = e.seq
            self._valid[e.slot] = e.valid
            used.add(e.slot)
        top = max(used) + 1 if used else 0
        self._next_slot = top
        self._free = [s for s in range(top) if s not in used]
        heapq.heapify(self._free)

    def apply_entries(self, image: StoreImage) -> int:
        """Merge image entries in, keeping whichever version is newer.

        Used by controller-driven state copies: unknown keys get indexed
        (the image's slot id is not preserved), known keys advance only if
        the entry's (session, seq) is >= the stored one.  Returns the number
        of entries applied.
        """
        applied = 0
        for e in image.entries:
            if e.key in self._index:
                loc = self._index[e.key]
                if (e.session, e.seq) < (self._sessions[loc], self._seqs[loc]):
                    continue
            else:
                loc = self.insert_index(e.key, e.value)
            self._values[loc] = e.value
            self._sessions[loc] = e.session
            self._seqs[loc] = e.seq
            self._valid[loc] = e.valid
            applied += 1
        return applied

    def _check(self, loc: int) -> None:
        if not 0 <= loc < self.capacity:
            raise OutOfRange(f"slot {loc} outside capacity {self.capacity}")
        if loc not in self._values:
            raise OutOfRange(f"slot {loc} not allocated")
