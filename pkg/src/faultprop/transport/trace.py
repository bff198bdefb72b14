from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Iterator


def _fmt(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple, frozenset, set)):
        items = sorted(value) if isinstance(value, (set, frozenset)) else value
        return ",".join(_fmt(v) for v in items) or "-"
    if isinstance(value, bytes):
        return value.hex() or "-"
    return str(value)


@dataclass(frozen=True)
class TraceRecord:
    step: int
    kind: str
    fields: tuple[tuple[str, Any], ...]

    def get(self, key: str, default: Any = None) -> Any:
        for k, v in self.fields:
            if k == key:
                return v
        return default

    def __getitem__(self, key: str) -> Any:
        for k, v in self.fields:
            if k == key:
                return v
        raise KeyError(key)

    def line(self) -> str:
        body = " ".join(f"{k}={_fmt(v)}" for k, v in self.fields)
        return f"{self.step} {self.kind} {body}".rstrip()


@dataclass
class Trace:
    """Replayable event log of one simulated execution.

    Exported as newline-delimited ``<step> <event-kind> <key=value...>``.
    """

    records: list[TraceRecord] = field(default_factory=list)

    def add(self, step: int, kind: str, **fields: Any) -> None:
        self.records.append(TraceRecord(step, kind, tuple(fields.items())))

    def __iter__(self) -> Iterator[TraceRecord]:
        return iter(self.records)

    def __len__(self) -> int:
        return len(self.records)

    def of_kind(self, *kinds: str) -> list[TraceRecord]:
        return [r for r in self.records if r.kind in kinds]

    def dumps(self) -> str:
        return "".join(r.line() + "\n" for r in self.records)
