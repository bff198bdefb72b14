"""Value types shared by the simulator, the explorer and the protocol layers."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

ANY_SOURCE = -1


class TransportUsageError(RuntimeError):
    """A contract violation by the caller, e.g. posting from a dead rank."""


class CollectiveCancelError(TransportUsageError):
    """Cancelling a request that belongs to a collective operation."""


class RequestKind(str, enum.Enum):
    SEND_STANDARD = "send-standard"
    SEND_SYNCHRONOUS = "send-synchronous"
    RECV = "recv"


class RequestState(str, enum.Enum):
    PENDING = "pending"
    COMPLETE = "complete"
    CANCELLED = "cancelled"
    ERRORED = "errored"


# error classes a request can end in
TRUNCATION = "truncation"
PROC_FAILED = "proc-failed"
PROC_FAILED_PENDING = "proc-failed-pending"


@dataclass(frozen=True)
class Envelope:
    id: tuple[int, int]
    source: int
    dest: int
    channel: int
    tag: int
    payload: bytes
    synchronous: bool
    post_step: int


@dataclass(eq=False)
class Request:
    """Handle to one pending point-to-point operation.

    The state moves from ``pending`` to exactly one terminal state and never
    changes afterwards.
    """

    id: tuple[int, int]
    kind: RequestKind
    owner: int
    channel: int
    tag: int
    peer: int
    capacity: int = 0
    collective: bool = False
    state: RequestState = RequestState.PENDING
    error: str | None = None
    payload: bytes | None = None
    source: int | None = None
    envelope: Envelope | None = None
    # index of the transition that made the request terminal
    done_at: int = -1
    history: list[RequestState] = field(default_factory=lambda: [RequestState.PENDING])

    @property
    def pending(self) -> bool:
        return self.state is RequestState.PENDING

    @property
    def terminal(self) -> bool:
        return self.state is not RequestState.PENDING

    def __repr__(self) -> str:
        return f"<Request {self.id[0]}.{self.id[1]} {self.kind.value} {self.state.value}>"
