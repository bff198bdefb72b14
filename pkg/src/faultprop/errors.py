"""Error outcomes of communication and the resolved error report."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping

MAX_CODE = 2**31 - 1


def check_code(code: int) -> int:
    if not isinstance(code, int) or not 1 <= code <= MAX_CODE:
        raise ValueError(f"error code must be an integer in [1, {MAX_CODE}], got {code!r}")
    return code


@dataclass(frozen=True)
class ErrorReport:
    """Which ranks failed and with which codes, sorted by rank."""

    entries: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if not self.entries:
            raise ValueError("an error report needs at least one entry")
        ranks = [r for r, _ in self.entries]
        if ranks != sorted(set(ranks)):
            raise ValueError(f"ranks must be unique and ascending: {ranks}")
        for _, code in self.entries:
            check_code(code)

    @classmethod
    def from_map(cls, failed: Mapping[int, int]) -> "ErrorReport":
        return cls(tuple(sorted(failed.items())))

    @classmethod
    def parse(cls, text: str) -> "ErrorReport":
        pairs = []
        for item in text.split(","):
            rank, code = item.split(":")
            pairs.append((int(rank), int(code)))
        return cls(tuple(pairs))

    @property
    def ranks(self) -> tuple[int, ...]:
        return tuple(r for r, _ in self.entries)

    def as_dict(self) -> dict[int, int]:
        return dict(self.entries)

    def __iter__(self) -> Iterable[tuple[int, int]]:
        return iter(self.entries)

    def __str__(self) -> str:
        return ",".join(f"{r}:{c}" for r, c in self.entries)


class UsageError(RuntimeError):
    """The caller broke the interface contract (singleton, closed comm, ...)."""


class ProtocolViolation(RuntimeError):
    """The protocol reached a state its invariants rule out."""


class CommError(Exception):
    """Base class of the error outcomes of ``wait`` and ``signal_error``."""

    variant = "error"


class PropagatedError(CommError):
    """One or more ranks signalled an error; all ranks see the same report."""

    variant = "propagated"

    def __init__(self, report: ErrorReport):
        super().__init__(f"errors signalled by ranks: {report}")
        self.report = report


class CorruptedCommError(CommError):
    """The communicator cannot be recovered and must be abandoned."""

    variant = "corrupted"

    def __init__(self, msg: str = "communicator corrupted"):
        super().__init__(msg)


# transport error classes that are not protocol outcomes
TRANSPORT_CODES = {"truncation": 1, "proc-failed": 2, "proc-failed-pending": 3, "revoked": 4}


class TransportError(CommError):
    """A transport failure that is neither a propagated error nor corruption."""

    variant = "transport-error"

    def __init__(self, cls: str):
        super().__init__(f"transport error: {cls}")
        self.cls = cls
        self.code = TRANSPORT_CODES.get(cls, 99)
