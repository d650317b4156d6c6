"""FIFO channel with the three adversarial buffer operations.

This is the reference semantics for what the explorer applies inline to its
queue tuples: DROP removes the head, REPEAT appends a copy of the head,
REORDER moves the head to the back.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional


class ChannelOp(enum.Enum):
    DROP = "drop"
    REPEAT = "repeat"
    REORDER = "reorder"


class EmptyQueue(Exception):
    pass


@dataclass
class Channel:
    src: str
    dst: str
    queue: list = field(default_factory=list)
    op_count: int = 0

    def push(self, deliver_time: int, pkt) -> None:
        self.queue.append((deliver_time, pkt))

    def pop(self):
        if not self.queue:
            raise EmptyQueue(f"{self.src}->{self.dst}")
        return self.queue.pop(0)

    def __len__(self) -> int:
        return len(self.queue)


def channel_op(ch: Channel, which: ChannelOp) -> None:
    if not ch.queue:
        raise EmptyQueue(f"{ch.src}->{ch.dst}")
    if which == ChannelOp.DROP:
        ch.queue.pop(0)
    elif which == ChannelOp.REPEAT:
        ch.queue.append(ch.queue[0])
    else:
        ch.queue.append(ch.queue.pop(0))
    ch.op_count += 1
