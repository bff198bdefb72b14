"""Communicators with error propagation.

Rank programs are generators; every blocking call is ``yield from``-ed::

    def program(ep):
        with Instance.acquire(ep) as inst:
            comm = inst.world.duplicate()

            def body():
                fut = comm.irecv(0, tag=1)
                msg = yield from fut.wait()
                ...

            try:
                yield from comm.scoped(body())
            except PropagatedError as exc:
                print(exc.report)

``wait`` and ``signal_error`` raise :class:`PropagatedError`,
:class:`CorruptedCommError` or :class:`TransportError`. An exception that
escapes ``scoped`` while the communicator is healthy marks the
communicator corrupted on every rank.

Two modes share this interface. In black-channel mode each communicator
owns a second channel used only for error traffic, with one pending
any-source receive on it. In ulfm mode errors revoke the communicator and
the ranks agree on the outcome (see :mod:`faultprop.ulfm`).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Any, Generator, Sequence

from . import collectives as coll
from . import ulfm
from .errors import (
    MAX_CODE,
    CommError,
    CorruptedCommError,
    ErrorReport,
    PropagatedError,
    ProtocolViolation,
    TransportError,
    UsageError,
    check_code,
)
from .transport import (
    ANY_SOURCE,
    PROC_FAILED,
    PROC_FAILED_PENDING,
    Endpoint,
    Request,
    RequestState,
)
from .wire import CODE_SIZE, ERR_TAG, encode_code

DEFAULT_CAPACITY = 1 << 16
# code carried by the notices of a rank that corrupts its communicator
UNWIND_CODE = MAX_CODE
# tag block of the first protocol collective of an error episode
EPISODE_TAG_BASE = coll.ROUNDS_PER_CALL


class Mode(str, enum.Enum):
    BLACK_CHANNEL = "black-channel"
    ULFM = "ulfm"


class CommState(str, enum.Enum):
    HEALTHY = "healthy"
    ERRORING = "erroring"
    REVOKED = "revoked"
    CLOSED = "closed"


@dataclass(frozen=True)
class Received:
    payload: bytes
    source: int


class Instance:
    """Per-rank runtime guard; at most one is live per rank.

    The runtime is finalised on release only if this instance initialised
    it.
    """

    def __init__(self, ep: Endpoint, mode: Mode, owns_runtime: bool):
        self.ep = ep
        self.mode = mode
        self.owns_runtime = owns_runtime
        self.released = False
        self.ulfm: ulfm.UlfmRuntime | None = None
        self.world: Communicator

    @classmethod
    def acquire(cls, ep: Endpoint, mode: Mode | str = Mode.BLACK_CHANNEL) -> "Instance":
        if ep.instance is not None:
            raise UsageError("an Instance is already live on this rank")
        mode = Mode(mode)
        if mode is Mode.ULFM and not ep.liveness:
            raise UsageError("ulfm mode needs a transport with liveness detection")
        owns = not ep.runtime_initialized
        if owns:
            ep.init_runtime()
        inst = cls(ep, mode, owns)
        ep.instance = inst
        world_channel = ep.alloc_channel(range(ep.size), role="data")
        if mode is Mode.ULFM:
            inst.ulfm = ulfm.UlfmRuntime(ep)
        inst.world = Communicator(inst, tuple(range(ep.size)), world_channel, name="world")
        return inst

    def release(self) -> None:
        if self.released:
            return
        self.released = True
        self.world._close_quietly()
        if self.ulfm is not None:
            self.ulfm.close()
        if self.owns_runtime:
            self.ep.finalize_runtime()
        self.ep.instance = None

    def __enter__(self) -> "Instance":
        return self

    def __exit__(self, *exc: Any) -> None:
        self.release()


class CommFuture:
    """Handle to one non-blocking operation of a communicator."""

    def __init__(self, comm: "Communicator", request: Request | None = None, coro=None):
        self.comm = comm
        self.request = request
        self.consumed = False
        self.collective = coro is not None
        self._coro = coro
        self._reqs: list[Request] = []
        self._finished = coro is None and request is None
        self._value: Any = None
        self._failure: Request | None = None
        if coro is not None:
            self._advance(first=True)

    # collective progress
    def _advance(self, first: bool = False) -> None:
        try:
            self._reqs = next(self._coro) if first else self._coro.send(None)
        except StopIteration as stop:
            self._finished, self._value, self._reqs = True, stop.value, []
        except coll.CollectiveFailed as exc:
            self._finished, self._failure, self._reqs = True, exc.req, []

    def _poll(self) -> None:
        ep = self.comm.ep
        if self.request is not None:
            self._finished = ep.test(self.request) is not RequestState.PENDING
            return
        while not self._finished and all(ep.test(r) is not RequestState.PENDING for r in self._reqs):
            self._advance()

    def _pending(self) -> list[Request]:
        reqs = [self.request] if self.request is not None else self._reqs
        return [r for r in reqs if self.comm.ep.test(r) is RequestState.PENDING]

    def _failure_class(self) -> str | None:
        req = self.request if self.request is not None else self._failure
        if req is None or req.state is RequestState.COMPLETE:
            return None
        return req.error or req.state.value

    def _result(self) -> Any:
        cls = self._failure_class()
        if cls is not None:
            raise TransportError(cls)
        if self.request is None:
            return self._value
        if self.request.kind.value == "recv":
            return Received(self.request.payload, self.comm.group.index(self.request.source))
        return None

    @property
    def done(self) -> bool:
        return self._finished

    def wait(self) -> Generator[Any, Any, Any]:
        """Block until the operation completes or an error episode ends.

        Returns :class:`Received` for receives, the reduced value for
        collectives and ``None`` for sends.
        """
        if self.consumed:
            raise UsageError("future already waited on")
        try:
            return (yield from self.comm._wait(self))
        finally:
            self.consumed = True
            if self in self.comm._outstanding:
                self.comm._outstanding.remove(self)


class Communicator:
    """One rank's handle on a communication context over a group of ranks.

    Not copyable; use :meth:`duplicate` for a new context.
    """

    def __init__(self, instance: Instance, group: Sequence[int], channel: int, name: str = ""):
        self.instance = instance
        self.ep = instance.ep
        self.group = tuple(group)
        self.rank = self.group.index(self.ep.rank)
        self.channel = channel
        self.name = name or f"comm{channel}"
        self.state = CommState.HEALTHY
        self.err_channel: int | None = None
        self.err_recv: Request | None = None
        self.outcome: CommError | None = None
        self.replacement: Communicator | None = None
        self._outstanding: list[CommFuture] = []
        self._coll_seq = 0
        self.agree_seq = 0
        self.shrink_seq = 0
        if instance.mode is Mode.BLACK_CHANNEL:
            self.err_channel = self.ep.alloc_channel(self.group, role="err")
            self.err_recv = self.ep.post_recv(ANY_SOURCE, self.err_channel, ERR_TAG, CODE_SIZE)
        else:
            instance.ulfm.register(self)

    def __copy__(self):
        raise TypeError("communicators cannot be copied; use duplicate()")

    __deepcopy__ = __copy__

    def __repr__(self) -> str:
        return f"<Communicator {self.name} rank {self.rank}/{self.size} {self.state.value}>"

    @property
    def id(self) -> int:
        return self.channel

    @property
    def size(self) -> int:
        return len(self.group)

    @property
    def mode(self) -> Mode:
        return self.instance.mode

    def duplicate(self) -> "Communicator":
        """Collective: every rank of the group calls it in the same order."""
        if self.state is not CommState.HEALTHY:
            raise UsageError(f"cannot duplicate a {self.state.value} communicator")
        channel = self.ep.alloc_channel(self.group, role="data")
        return Communicator(self.instance, self.group, channel, name=f"{self.name}.dup")

    def derive(self, group: Sequence[int]) -> "Communicator":
        """New communicator over ``group`` (world ranks) with fresh channels."""
        channel = self.ep.alloc_channel(group, role="data")
        return Communicator(self.instance, group, channel, name=f"{self.name}.shrunk")

    # -- point-to-point and collectives --------------------------------------

    def _inert(self) -> CommFuture | None:
        if self.state is CommState.HEALTHY:
            return None
        if self.state in (CommState.REVOKED, CommState.CLOSED):
            return CommFuture(self)
        raise UsageError(f"communicator is {self.state.value}")

    def _track(self, fut: CommFuture) -> CommFuture:
        self._outstanding.append(fut)
        return fut

    def isend(self, dest: int, tag: int, payload: bytes) -> CommFuture:
        if tag < 0:
            raise ValueError("user tags are non-negative")
        inert = self._inert()
        if inert is not None:
            return inert
        req = self.ep.post_send(self.group[dest], self.channel, tag, payload)
        return self._track(CommFuture(self, request=req))

    def irecv(self, source: int, tag: int, capacity: int = DEFAULT_CAPACITY) -> CommFuture:
        if tag < 0:
            raise ValueError("user tags are non-negative")
        inert = self._inert()
        if inert is not None:
            return inert
        src = ANY_SOURCE if source == ANY_SOURCE else self.group[source]
        req = self.ep.post_recv(src, self.channel, tag, capacity)
        return self._track(CommFuture(self, request=req))

    def _user_ctx(self) -> coll.CollectiveContext:
        self._coll_seq += 1
        base = -coll.ROUNDS_PER_CALL * self._coll_seq
        return coll.CollectiveContext(self.ep, self.group, self.rank, self.channel, base)

    def all_reduce(self, value: int | Sequence[int], op: str = "sum") -> CommFuture:
        """Non-blocking all-reduce of signed 64-bit integers.

        ``op`` is one of ``sum``, ``max`` or ``band``. A scalar argument
        gives a scalar result.
        """
        if op not in coll.OPS:
            raise ValueError(f"unknown reduction {op!r}")
        inert = self._inert()
        if inert is not None:
            return inert
        scalar = isinstance(value, int)
        values = [value] if scalar else list(value)
        ctx = self._user_ctx()

        def run():
            out = yield from coll.allreduce(ctx, values, op)
            return out[0] if scalar else out

        return self._track(CommFuture(self, coro=run()))

    def barrier(self) -> CommFuture:
        inert = self._inert()
        if inert is not None:
            return inert
        return self._track(CommFuture(self, coro=coll.barrier(self._user_ctx())))

    # -- waiting ---------------------------------------------------------------

    def _wait(self, fut: CommFuture):
        if fut.request is None and fut._coro is None:
            # posted after the communicator was revoked or closed
            if self.state is CommState.REVOKED:
                yield from ulfm.on_revoked(self, "none")
            raise CorruptedCommError("communicator already closed by an error episode")
        if self.state is CommState.CLOSED:
            raise CorruptedCommError("communicator already closed by an error episode")
        if self.mode is Mode.ULFM:
            return (yield from self._wait_ulfm(fut))
        return (yield from self._wait_black_channel(fut))

    def _wait_black_channel(self, fut: CommFuture):
        ep = self.ep
        while True:
            fut._poll()
            if fut.done:
                break
            which = yield from ep.wait_groups([fut._pending(), [self.err_recv]])
            if which == 1:
                yield from self._episode(signalling=False, corrupt=False, code=0)
        # the request won the race; an error may have arrived as well
        if ep.test(self.err_recv) is RequestState.COMPLETE:
            yield from self._episode(signalling=False, corrupt=False, code=0)
        return fut._result()

    def _wait_ulfm(self, fut: CommFuture):
        ep, rt = self.ep, self.instance.ulfm
        rt.pump()
        if self.state is CommState.REVOKED:
            yield from ulfm.on_revoked(self, "none")
        while True:
            fut._poll()
            if fut.done:
                break
            yield from ep.wait_groups([fut._pending(), [rt.ctrl_recv]])
            rt.pump()
            if self.state is CommState.REVOKED:
                yield from ulfm.on_revoked(self, "none")
        if fut._failure_class() in (PROC_FAILED, PROC_FAILED_PENDING):
            rt.revoke(self)
            yield from ulfm.on_revoked(self, "hard-fault")
        rt.pump()
        if self.state is CommState.REVOKED:
            yield from ulfm.on_revoked(self, "none")
        return fut._result()

    # -- error signalling --------------------------------------------------------

    def signal_error(self, code: int):
        """Propagate ``code`` to every rank. Always raises.

        The signalling rank gets :class:`PropagatedError` with its own entry
        in the report, like every other rank.
        """
        check_code(code)
        if self.state is CommState.CLOSED:
            raise UsageError("cannot signal on a closed communicator")
        if self.mode is Mode.ULFM:
            self.instance.ulfm.revoke(self)
            yield from ulfm.on_revoked(self, "signalled", code)
        yield from self._episode(signalling=True, corrupt=False, code=code)

    def _episode(self, signalling: bool, corrupt: bool, code: int):
        ep = self.ep
        self.state = CommState.ERRORING
        ep.record("episode", comm=self.id, signalling=signalling, corrupt=corrupt)
        sends: list[Request] = []
        if signalling:
            payload = encode_code(code)
            for peer in range(self.size):
                if peer != self.rank:
                    sends.append(
                        ep.post_send(self.group[peer], self.err_channel, ERR_TAG, payload, synchronous=True)
                    )
            # until every notice is matched, or a notice reached us
            if sends:
                yield from ep.wait_groups([[self.err_recv], sends])
            if ep.test(self.err_recv) is RequestState.PENDING:
                ep.cancel(self.err_recv)
        tags = _TagBlocks(self, self.err_channel)
        yield from coll.run_blocking(ep, coll.barrier(tags.next()))
        # notices to ranks reached by another signaller are still unmatched
        for req in sends:
            if ep.test(req) is RequestState.PENDING:
                ep.cancel(req)
        vote = yield from coll.run_blocking(
            ep, coll.allreduce(tags.next(), [0 if corrupt else 1], "band", width=1, signed=False)
        )
        self._abandon_outstanding(count_leaks=True)
        self.state = CommState.CLOSED
        if vote[0] == 0:
            self.outcome = CorruptedCommError()
        else:
            report = yield from _determine_failed(tags, signalling, code, self.rank)
            self.outcome = PropagatedError(report)
        raise self.outcome

    def _abandon_outstanding(self, count_leaks: bool) -> None:
        """Cancel pending user point-to-point requests; collective requests
        cannot be cancelled and are left behind."""
        ep = self.ep
        leaked = 0
        for fut in self._outstanding:
            if fut.request is not None:
                if ep.test(fut.request) is RequestState.PENDING:
                    ep.cancel(fut.request)
            else:
                leaked += len(fut._pending())
        self._outstanding.clear()
        if leaked:
            ep.record("leak" if count_leaks else "release", comm=self.id, count=leaked)

    # -- scope handling ------------------------------------------------------------

    def scope_exit(self, unwinding: bool):
        """Hook for leaving the communicator's scope.

        With ``unwinding`` set the communicator is declared corrupted on
        every rank; the resulting outcome is stored in :attr:`outcome`
        instead of being raised. A clean exit that finds a pending error
        episode joins it and raises its outcome.
        """
        if self.state in (CommState.HEALTHY, CommState.REVOKED) and unwinding:
            try:
                if self.mode is Mode.ULFM:
                    self.instance.ulfm.revoke(self)
                    yield from ulfm.on_revoked(self, "corrupt")
                else:
                    yield from self._episode(signalling=True, corrupt=True, code=UNWIND_CODE)
            except CommError:
                pass
            return
        if self.state is CommState.HEALTHY and self.mode is Mode.BLACK_CHANNEL:
            if self.ep.test(self.err_recv) is RequestState.COMPLETE:
                yield from self._episode(signalling=False, corrupt=False, code=0)
        if self.mode is Mode.ULFM and self.state is not CommState.CLOSED:
            self.instance.ulfm.pump()
            if self.state is CommState.REVOKED:
                yield from ulfm.on_revoked(self, "none")
        self._close_quietly()

    def _close_quietly(self) -> None:
        if self.state is CommState.CLOSED:
            return
        if self.err_recv is not None and self.ep.test(self.err_recv) is RequestState.PENDING:
            self.ep.cancel(self.err_recv)
        self._abandon_outstanding(count_leaks=True)
        self.state = CommState.CLOSED
        self.ep.record("close", comm=self.id)

    def scoped(self, body: Generator):
        """Run ``body`` and call :meth:`scope_exit` with the right flag."""
        try:
            result = yield from body
        except Exception:
            yield from self.scope_exit(unwinding=True)
            raise
        yield from self.scope_exit(unwinding=False)
        return result

    # -- ulfm primitives -------------------------------------------------------------

    def revoke(self) -> None:
        self._require_ulfm()
        self.instance.ulfm.revoke(self)

    def agree(self, value: int):
        self._require_ulfm()
        return (yield from ulfm.agree(self, value))

    def shrink(self):
        self._require_ulfm()
        return (yield from ulfm.shrink(self))

    def _require_ulfm(self) -> None:
        if self.mode is not Mode.ULFM:
            raise UsageError("operation needs ulfm mode")


class _TagBlocks:
    """Hands out successive tag blocks for the protocol collectives of one
    episode, so every rank uses the same tags without negotiating."""

    def __init__(self, comm: Communicator, channel: int, group: Sequence[int] | None = None, rank: int | None = None):
        self.ep = comm.ep
        self.group = comm.group if group is None else tuple(group)
        self.rank = comm.rank if rank is None else rank
        self.channel = channel
        self.base = EPISODE_TAG_BASE

    def next(self) -> coll.CollectiveContext:
        ctx = coll.CollectiveContext(self.ep, self.group, self.rank, self.channel, self.base, collective=False)
        self.base += coll.ROUNDS_PER_CALL
        return ctx


def _determine_failed(tags: _TagBlocks, self_failed: bool, code: int, report_rank: int):
    ep = tags.ep
    n = len(tags.group)
    index = yield from coll.run_blocking(ep, coll.scan_sum(tags.next(), 1 if self_failed else 0))
    count = yield from coll.run_blocking(
        ep, coll.bcast(tags.next(), index if tags.rank == n - 1 else 0, root=n - 1)
    )
    if count == 0:
        raise ProtocolViolation("failed-rank resolution entered with no failed rank")
    ranks, codes = [0] * count, [0] * count
    if self_failed:
        ranks[index - 1] = report_rank
        codes[index - 1] = code
    ranks = yield from coll.run_blocking(ep, coll.allreduce(tags.next(), ranks, "max", signed=False))
    codes = yield from coll.run_blocking(ep, coll.allreduce(tags.next(), codes, "max", signed=False))
    return ErrorReport(tuple(zip(ranks, codes)))


def determine_failed(comm: Communicator, self_failed: bool, code: int = 0, channel: int | None = None):
    """Collective: resolve which ranks failed and with which codes.

    Failed ranks get an index from an inclusive prefix sum over a 0/1
    indicator; the last rank broadcasts the count; each failed rank writes
    its rank and code into its slot of two zeroed arrays, which an
    element-wise MAX all-reduce combines on every rank.
    """
    if self_failed:
        check_code(code)
    tags = _TagBlocks(comm, comm.channel if channel is None else channel)
    return (yield from _determine_failed(tags, self_failed, code, comm.rank))
