"""Fault schedules and their line-oriented text form.

One event per line::

    <time> <rank> kill
    <time> <rank> drop <src>-><dst> tag=<t>
    <time> <rank> delay <src>-><dst> tag=<t> by=<dt>

``time`` is simulated time, i.e. the number of executed transitions. For
``drop`` and ``delay`` the rank column names the rank that observes the
fault; matching is done on the message pattern alone.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable

_PATTERN = re.compile(r"^(\d+)->(\d+)$")


class FaultParseError(ValueError):
    pass


@dataclass(frozen=True)
class MessagePattern:
    source: int
    dest: int
    tag: int

    def matches(self, source: int, dest: int, tag: int) -> bool:
        return (source, dest, tag) == (self.source, self.dest, self.tag)

    def __str__(self) -> str:
        return f"{self.source}->{self.dest} tag={self.tag}"


@dataclass(frozen=True)
class FaultEvent:
    time: int
    rank: int
    action: str  # kill | drop | delay
    pattern: MessagePattern | None = None
    duration: int = 0

    def to_line(self) -> str:
        if self.action == "kill":
            return f"{self.time} {self.rank} kill"
        if self.action == "drop":
            return f"{self.time} {self.rank} drop {self.pattern}"
        return f"{self.time} {self.rank} delay {self.pattern} by={self.duration}"


@dataclass(frozen=True)
class FaultScript:
    events: tuple[FaultEvent, ...] = ()

    def __post_init__(self):
        times = [e.time for e in self.events]
        if times != sorted(times):
            raise ValueError("fault events must be sorted by time")

    @classmethod
    def of(cls, events: Iterable[FaultEvent]) -> "FaultScript":
        return cls(tuple(sorted(events, key=lambda e: e.time)))

    @property
    def kills(self) -> tuple[FaultEvent, ...]:
        return tuple(e for e in self.events if e.action == "kill")

    @property
    def killed_ranks(self) -> frozenset[int]:
        return frozenset(e.rank for e in self.kills)

    def dumps(self) -> str:
        return "".join(e.to_line() + "\n" for e in self.events)


def parse_fault_line(line: str) -> FaultEvent:
    parts = line.split()
    if len(parts) < 3:
        raise FaultParseError(f"bad fault line: {line!r}")
    try:
        time, rank = int(parts[0]), int(parts[1])
    except ValueError:
        raise FaultParseError(f"bad fault line: {line!r}") from None
    if time < 0 or rank < 0:
        raise FaultParseError(f"negative time or rank: {line!r}")
    action = parts[2]
    if action == "kill":
        if len(parts) != 3:
            raise FaultParseError(f"trailing fields after kill: {line!r}")
        return FaultEvent(time, rank, "kill")
    if action not in ("drop", "delay"):
        raise FaultParseError(f"unknown fault action {action!r}")
    expected = 5 if action == "drop" else 6
    if len(parts) != expected:
        raise FaultParseError(f"bad {action} line: {line!r}")
    m = _PATTERN.match(parts[3])
    if not m or not parts[4].startswith("tag="):
        raise FaultParseError(f"bad message pattern: {line!r}")
    try:
        pattern = MessagePattern(int(m.group(1)), int(m.group(2)), int(parts[4][4:]))
        duration = 0
        if action == "delay":
            if not parts[5].startswith("by="):
                raise FaultParseError(f"missing by= in {line!r}")
            duration = int(parts[5][3:])
    except ValueError:
        raise FaultParseError(f"bad number in {line!r}") from None
    return FaultEvent(time, rank, action, pattern, duration)


def parse_faults(text: str) -> FaultScript:
    events = []
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            events.append(parse_fault_line(line))
    return FaultScript.of(events)
