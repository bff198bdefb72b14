"""Deterministic in-process message-passing simulator.

Each rank runs a generator-based program. Blocking calls are written as
``yield from endpoint.wait_any(reqs)``; everything else returns at once.
The simulator is single threaded. At every step it collects the enabled
transitions, asks a *chooser* which one to execute, and executes it:

* ``("run", r)`` resumes rank ``r`` until it blocks, pauses or finishes;
* ``("msg", src, seq)`` delivers one in-flight envelope to its destination;
* ``("kill", r)`` applies a scheduled kill. Normally it is forced as soon
  as it is due; with ``free_kills`` it is an ordinary transition, enabled
  from its time on, so the chooser decides where it lands.

Envelopes travel in FIFO order per ``(source, dest, channel)``, which gives
MPI-style non-overtaking. Standard sends complete when posted (buffered);
synchronous sends complete when matched.

Every transition records which simulator objects it read and wrote. The
schedule explorer uses these footprints to decide which transitions commute.
Footprints must not depend on the order of commuting transitions, since
the explorer compares footprints recorded in different states. Posting a
receive commutes with delivering a message it will match. A delivery
writes the ``slot`` keys that every observation of a matching receive
(test, wake-up, cancel) reads, whether or not the receive is posted yet,
and always writes its synchronous sender's request. Posting a receive
writes the ``sslot`` key read by observations of synchronous sends it could
match. Deliveries also conflict with other arrivals for the same tag
(``arr``) and with cancellation of their own send (``env``).
"""

from __future__ import annotations

import random
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Generator, Hashable, Iterable, Sequence

from .faults import FaultScript
from .trace import Trace
from .types import (
    ANY_SOURCE,
    PROC_FAILED,
    PROC_FAILED_PENDING,
    TRUNCATION,
    CollectiveCancelError,
    Envelope,
    Request,
    RequestKind,
    RequestState,
    TransportUsageError,
)

Proc = tuple
Program = Callable[["Endpoint"], Generator[Any, Any, Any]]
Chooser = Callable[[Sequence[Proc], "Simulator"], Proc]

WILDCARD = "*"


class SimulationCrash(RuntimeError):
    """A rank program raised an exception that it did not handle."""

    def __init__(self, rank: int, exc: BaseException):
        super().__init__(f"rank {rank} crashed: {exc!r}")
        self.rank = rank
        self.exc = exc


class _Wait:
    __slots__ = ("groups",)

    def __init__(self, groups: list[list[Request]]):
        self.groups = groups


class _Pause:
    __slots__ = ()


_PAUSE = _Pause()


@dataclass
class StepInfo:
    proc: Proc
    enabled: tuple[Proc, ...]
    reads: frozenset
    writes: frozenset
    enablers: frozenset[int]
    forced: bool = False


@dataclass
class RunResult:
    trace: Trace
    status: dict[int, str]
    results: dict[int, Any]
    deadlocked: bool
    truncated: bool
    steps: int
    requests: list[Request]
    envelopes: list[Envelope]
    step_info: list[StepInfo] = field(default_factory=list)
    stopped: bool = False


@dataclass
class _Rank:
    program: Program
    gen: Generator | None = None
    status: str = "ready"  # ready | blocked | done | killed
    groups: list[list[Request]] | None = None
    # some group of a blocked rank is satisfied; only grows while blocked
    wakeable: bool = False
    result: Any = None
    next_channel: int = 0
    next_seq: int = 0
    runtime_initialized: bool = False
    instance: Any = None
    members: dict[int, frozenset[int]] = field(default_factory=dict)


def _first_satisfied(groups: list[list[Request]]) -> int | None:
    for i, group in enumerate(groups):
        if all(r.terminal for r in group):
            return i
    return None


class Endpoint:
    """One rank's handle on the transport.

    Only the owning rank's program may call these methods.
    """

    def __init__(self, sim: "Simulator", rank: int):
        self._sim = sim
        self.rank = rank

    @property
    def size(self) -> int:
        return self._sim.size

    @property
    def liveness(self) -> bool:
        return self._sim.liveness

    @property
    def now(self) -> int:
        return self._sim.now

    # runtime lifecycle, used by the protocol Instance
    @property
    def runtime_initialized(self) -> bool:
        return self._sim._ranks[self.rank].runtime_initialized

    def init_runtime(self) -> None:
        st = self._sim._ranks[self.rank]
        if st.runtime_initialized:
            raise TransportUsageError("runtime already initialised")
        st.runtime_initialized = True
        self.record("init")

    def finalize_runtime(self) -> None:
        st = self._sim._ranks[self.rank]
        if not st.runtime_initialized:
            raise TransportUsageError("runtime not initialised")
        st.runtime_initialized = False
        self.record("finalize")

    @property
    def instance(self) -> Any:
        return self._sim._ranks[self.rank].instance

    @instance.setter
    def instance(self, value: Any) -> None:
        self._sim._ranks[self.rank].instance = value

    @property
    def channels_allocated(self) -> int:
        return self._sim._ranks[self.rank].next_channel

    def alloc_channel(self, members: Iterable[int], role: str = "data") -> int:
        """Allocate the next channel id on this rank.

        Ids are allocated from a per-rank counter, so ranks that allocate in
        the same order agree on them without communicating.
        """
        st = self._sim._ranks[self.rank]
        ch = st.next_channel
        st.next_channel += 1
        st.members[ch] = frozenset(members)
        self.record("chan", ch=ch, role=role)
        return ch

    def post_send(
        self,
        dest: int,
        channel: int,
        tag: int,
        payload: bytes,
        synchronous: bool = False,
        collective: bool = False,
    ) -> Request:
        return self._sim._post_send(self.rank, dest, channel, tag, bytes(payload), synchronous, collective)

    def post_recv(self, source: int, channel: int, tag: int, capacity: int, collective: bool = False) -> Request:
        return self._sim._post_recv(self.rank, source, channel, tag, capacity, collective)

    def cancel(self, req: Request) -> bool:
        return self._sim._cancel(self.rank, req)

    def test(self, req: Request) -> RequestState:
        self._sim._observe(req)
        return req.state

    def failed_ranks(self) -> frozenset[int]:
        if not self._sim.liveness:
            raise TransportUsageError("liveness detection is disabled")
        return frozenset(self._sim._dead)

    def wait_groups(self, groups: Sequence[Sequence[Request]]) -> Generator[Any, Any, int]:
        """Block until every request of some group is terminal.

        Returns the lowest index among the satisfied groups.
        """
        if not groups or any(not g for g in groups):
            raise TransportUsageError("wait needs non-empty request groups")
        return (yield _Wait([list(g) for g in groups]))

    def wait_any(self, reqs: Sequence[Request]) -> Generator[Any, Any, int]:
        return (yield from self.wait_groups([[r] for r in reqs]))

    def wait_all(self, reqs: Sequence[Request]) -> Generator[Any, Any, None]:
        if reqs:
            yield from self.wait_groups([list(reqs)])

    def pause(self) -> Generator[Any, Any, None]:
        """Give up the processor for one scheduling step (compute delay)."""
        yield _PAUSE

    def record(self, kind: str, **fields: Any) -> None:
        self._sim.trace.add(self._sim._step, kind, rank=self.rank, **fields)


class Simulator:
    """Single-use simulation of ``len(programs)`` ranks."""

    def __init__(
        self,
        programs: Sequence[Program],
        faults: FaultScript | None = None,
        liveness: bool = False,
        honor_delays: bool = True,
        free_kills: bool = False,
        max_steps: int = 200_000,
        record_steps: bool = False,
        preinitialized: bool = False,
    ):
        if not programs:
            raise ValueError("need at least one rank")
        self.size = len(programs)
        self.faults = faults or FaultScript()
        for ev in self.faults.events:
            if ev.rank >= self.size:
                raise ValueError(f"fault references rank {ev.rank} outside group of {self.size}")
        self.liveness = liveness
        self.honor_delays = honor_delays
        self.free_kills = free_kills
        self.max_steps = max_steps
        self.record_steps = record_steps
        self.trace = Trace()
        self.now = 0
        self._step = 0
        self._ranks = [_Rank(p, runtime_initialized=preinitialized) for p in programs]
        self.endpoints = [Endpoint(self, r) for r in range(self.size)]
        self._fifos: dict[tuple[int, int, int], deque[Envelope]] = {}
        # keys of the non-empty fifos
        self._busy: set[tuple[int, int, int]] = set()
        self._posted: dict[tuple[int, int], list[Request]] = {}
        self._unexpected: dict[tuple[int, int], list[Envelope]] = {}
        self._release: dict[tuple[int, int], int] = {}
        self._withdrawn: set[tuple[int, int]] = set()
        self._send_req: dict[tuple[int, int], Request] = {}
        self._post_idx: dict[tuple[int, int], int] = {}
        self._last_delivery: dict[tuple[int, int, int], int] = {}
        self._pending: dict[tuple[int, int], Request] = {}
        self._dead: set[int] = set()
        self._kills = deque(self.faults.kills)
        self.requests: list[Request] = []
        self.envelopes: list[Envelope] = []
        self.step_info: list[StepInfo] = []
        self._reads: set = set()
        self._writes: set = set()
        self._enablers: set[int] = set()
        self._arrived_at: dict[tuple[int, int], int] = {}
        self._needs: dict[tuple[int, int], int] = {}
        self._current_rank: int | None = None
        self._stop = False

    # -- footprint bookkeeping -------------------------------------------

    def _read(self, obj: Hashable) -> None:
        self._reads.add(obj)

    def _observe(self, req: Request) -> None:
        """Footprint of looking at a request's state."""
        self._reads.add(("req", req.id))
        if req.kind is RequestKind.RECV:
            self._reads.add(("slot", req.owner, req.channel, req.tag, req.peer))
        elif req.kind is RequestKind.SEND_SYNCHRONOUS:
            # completes when some receive matches it, posted before or after
            # the delivery
            self._reads.add(("sslot", req.peer, req.channel, req.tag, req.owner))
            self._reads.add(("sslot", req.peer, req.channel, req.tag, ANY_SOURCE))

    def _write(self, obj: Hashable) -> None:
        self._writes.add(obj)

    # -- request lifecycle -------------------------------------------------

    def _new_request(self, owner: int, kind: RequestKind, **kw: Any) -> Request:
        st = self._ranks[owner]
        req = Request(id=(owner, st.next_seq), kind=kind, owner=owner, **kw)
        st.next_seq += 1
        self.requests.append(req)
        self._pending[req.id] = req
        return req

    def _finish(
        self, req: Request, state: RequestState, error: str | None = None, footprint: bool = True
    ) -> None:
        assert req.pending, req
        req.state = state
        req.error = error
        req.history.append(state)
        req.done_at = self._step
        self._pending.pop(req.id, None)
        owner = self._ranks[req.owner]
        if owner.status == "blocked" and not owner.wakeable:
            owner.wakeable = _first_satisfied(owner.groups) is not None
        if footprint:
            self._write(("req", req.id))
        if state is RequestState.ERRORED:
            self.trace.add(self._step, "errored", req=req.id, rank=req.owner, cls=error)

    def _check_live_sender(self, rank: int) -> None:
        if rank in self._dead:
            raise TransportUsageError(f"rank {rank} is dead")

    # -- operations --------------------------------------------------------

    def _post_send(self, src, dest, channel, tag, payload, synchronous, collective) -> Request:
        self._check_live_sender(src)
        if not 0 <= dest < self.size:
            raise TransportUsageError(f"bad destination {dest}")
        kind = RequestKind.SEND_SYNCHRONOUS if synchronous else RequestKind.SEND_STANDARD
        req = self._new_request(src, kind, channel=channel, tag=tag, peer=dest, collective=collective)
        env = Envelope(req.id, src, dest, channel, tag, payload, synchronous, self.now)
        req.envelope = env
        self.envelopes.append(env)
        self.trace.add(
            self._step, "send", id=req.id, src=src, dst=dest, ch=channel, tag=tag,
            sync=synchronous, len=len(payload),
        )
        if self.liveness and dest in self._dead:
            self._finish(req, RequestState.ERRORED, PROC_FAILED)
            return req
        if not synchronous:
            self._finish(req, RequestState.COMPLETE)
        for ev in self.faults.events:
            if ev.time > self.now or ev.pattern is None:
                continue
            if ev.pattern.matches(src, dest, tag):
                if ev.action == "drop":
                    self.trace.add(self._step, "drop", env=req.id)
                    return req
                self._release[req.id] = self.now + ev.duration
        self._send_req[req.id] = req
        self._post_idx[req.id] = self._step
        self._fifos.setdefault((src, dest, channel), deque()).append(env)
        self._busy.add((src, dest, channel))
        return req

    def _post_recv(self, dst, source, channel, tag, capacity, collective) -> Request:
        self._check_live_sender(dst)
        if source != ANY_SOURCE and not 0 <= source < self.size:
            raise TransportUsageError(f"bad source {source}")
        req = self._new_request(
            dst, RequestKind.RECV, channel=channel, tag=tag, peer=source,
            capacity=capacity, collective=collective,
        )
        self.trace.add(self._step, "recv", id=req.id, rank=dst, src=source, ch=channel, tag=tag)
        self._write(("sslot", dst, channel, tag, source))
        if self.liveness and source in self._dead:
            self._finish(req, RequestState.ERRORED, PROC_FAILED)
            return req
        queue = self._unexpected.get((dst, channel), [])
        for i, env in enumerate(queue):
            if env.tag == tag and source in (ANY_SOURCE, env.source):
                del queue[i]
                self._match(env, req, from_post=True)
                return req
        self._posted.setdefault((dst, channel), []).append(req)
        return req

    def _match(self, env: Envelope, recv: Request, from_post: bool = False) -> None:
        # a post that finds its message already arrived leaves only the
        # sslot footprint, so that post and delivery commute in both orders
        fp = not from_post
        if fp:
            self._write(("env", env.id))
        self.trace.add(self._step, "match", send=env.id, recv=recv.id, src=env.source, dst=env.dest)
        if len(env.payload) > recv.capacity:
            self._finish(recv, RequestState.ERRORED, TRUNCATION, footprint=fp)
        else:
            recv.payload = env.payload
            recv.source = env.source
            self._finish(recv, RequestState.COMPLETE, footprint=fp)
        sreq = self._send_req[env.id]
        if sreq.pending:
            self._finish(sreq, RequestState.COMPLETE, footprint=fp)
        if from_post:
            # the completion still needed the delivery
            self._needs[recv.id] = self._arrived_at[env.id]
            self._needs[sreq.id] = self._arrived_at[env.id]

    def _cancel(self, rank: int, req: Request) -> bool:
        if req.owner != rank:
            raise TransportUsageError("cancel on another rank's request")
        if req.collective:
            raise CollectiveCancelError(
                "cancelling a request that belongs to a collective operation is erroneous"
            )
        self._observe(req)
        if req.terminal:
            self.trace.add(self._step, "cancel", id=req.id, rank=rank, ok=False)
            return False
        if req.kind is RequestKind.RECV:
            key = (rank, req.channel)
            self._posted[key].remove(req)
            self._write(("slot", rank, req.channel, req.tag, req.peer))
        else:
            env = req.envelope
            self._write(("env", env.id))
            queue = self._unexpected.get((env.dest, env.channel), [])
            if env in queue:
                queue.remove(env)
            else:
                self._withdrawn.add(env.id)
        self._finish(req, RequestState.CANCELLED)
        self.trace.add(self._step, "cancel", id=req.id, rank=rank, ok=True)
        return True

    # -- transitions -------------------------------------------------------

    def _deliverable(self, env: Envelope) -> bool:
        if not self.honor_delays:
            return True
        return self._release.get(env.id, -1) <= self.now

    def enabled(self) -> list[Proc]:
        due = bool(self._kills) and self._kills[0].time <= self.now
        if due and not self.free_kills:
            return [("kill", self._kills[0].rank)]
        procs: list[Proc] = [("kill", self._kills[0].rank)] if due else []
        for r, st in enumerate(self._ranks):
            if st.status == "ready":
                procs.append(("run", r))
            elif st.status == "blocked" and st.wakeable:
                procs.append(("run", r))
        for key in self._busy:
            head = self._fifos[key][0]
            if self._deliverable(head):
                procs.append(("msg",) + head.id)
        procs.sort()
        return procs

    def _advance_clock(self) -> bool:
        """Jump simulated time to the next timed event, if there is one."""
        times = []
        if self._kills:
            times.append(self._kills[0].time)
        for fifo in self._fifos.values():
            if fifo:
                times.append(self._release.get(fifo[0].id, -1))
        times = [t for t in times if t > self.now]
        if not times:
            return False
        self.now = min(times)
        return True

    def _execute(self, proc: Proc) -> None:
        self._reads = set()
        self._writes = set()
        self._enablers = set()
        kind = proc[0]
        if kind == "run":
            self._run_rank(proc[1])
        elif kind == "msg":
            self._deliver((proc[1], proc[2]))
        elif kind == "kill":
            self._kill()
        else:  # pragma: no cover
            raise ValueError(proc)

    def _run_rank(self, r: int) -> None:
        st = self._ranks[r]
        value: Any = None
        if st.status == "blocked":
            for g in st.groups:
                for req in g:
                    self._observe(req)
            idx = _first_satisfied(st.groups)
            value = idx
            # a wait on alternatives could have been satisfied by another
            # group, so its completions race with the wake-up instead of
            # enabling it
            if len(st.groups) == 1:
                for req in st.groups[0]:
                    self._enablers.add(req.done_at)
                    if req.id in self._needs:
                        self._enablers.add(self._needs[req.id])
            st.groups = None
            st.wakeable = False
        if st.gen is None:
            st.gen = st.program(self.endpoints[r])
        st.status = "ready"
        self._current_rank = r
        try:
            while True:
                cmd = st.gen.send(value)
                if isinstance(cmd, _Pause):
                    return
                if not isinstance(cmd, _Wait):
                    raise TransportUsageError(f"rank {r} yielded {cmd!r}; use endpoint.wait_*")
                for g in cmd.groups:
                    for req in g:
                        if req.owner != r:
                            raise TransportUsageError("waiting on another rank's request")
                # every wait is a scheduling point, even when already
                # satisfied, so a rank step never both posts a receive and
                # observes its completion
                st.status = "blocked"
                st.groups = cmd.groups
                st.wakeable = _first_satisfied(cmd.groups) is not None
                return
        except StopIteration as stop:
            st.status = "done"
            st.result = stop.value
            self.trace.add(self._step, "done", rank=r)
        except Exception as exc:
            st.status = "done"
            self.trace.add(self._step, "crash", rank=r, error=type(exc).__name__)
            raise SimulationCrash(r, exc) from exc
        finally:
            self._current_rank = None

    def _deliver(self, env_id: tuple[int, int]) -> None:
        src = env_id[0]
        # locate the fifo whose head is this envelope
        for key in self._busy:
            fifo = self._fifos[key]
            if fifo[0].id == env_id:
                break
        else:  # pragma: no cover
            raise KeyError(env_id)
        env = fifo.popleft()
        if not fifo:
            self._busy.discard(key)
        self._enablers.add(self._post_idx[env.id])
        if key in self._last_delivery:
            self._enablers.add(self._last_delivery[key])
        self._last_delivery[key] = self._step
        self._arrived_at[env.id] = self._step
        dst, ch, tag = env.dest, env.channel, env.tag
        self._write(("env", env.id))
        self._write(("arr", dst, ch, tag))
        self._write(("slot", dst, ch, tag, src))
        self._write(("slot", dst, ch, tag, ANY_SOURCE))
        if env.synchronous:
            self._write(("req", env.id))
        if env.id in self._withdrawn:
            self.trace.add(self._step, "discard", env=env.id, why="cancelled")
            return
        if dst in self._dead:
            self.trace.add(self._step, "discard", env=env.id, why="dead")
            return
        posted = self._posted.get((dst, ch), [])
        for i, req in enumerate(posted):
            if req.tag == tag and req.peer in (ANY_SOURCE, src):
                del posted[i]
                self._match(env, req)
                return
        self.trace.add(self._step, "arrive", env=env.id, dst=dst)
        self._unexpected.setdefault((dst, ch), []).append(env)

    def _kill(self) -> None:
        ev = self._kills.popleft()
        r = ev.rank
        self._write(WILDCARD)
        self.trace.add(self._step, "kill", rank=r)
        if r in self._dead:
            return
        self._dead.add(r)
        st = self._ranks[r]
        st.status = "killed"
        st.groups = None
        if not self.liveness:
            return
        for req in list(self._pending.values()):
            if req.owner == r or req.owner in self._dead:
                continue
            if req.kind is RequestKind.SEND_SYNCHRONOUS and req.peer == r:
                self._finish(req, RequestState.ERRORED, PROC_FAILED)
            elif req.kind is RequestKind.RECV:
                members = self._ranks[req.owner].members.get(req.channel, frozenset())
                if req.peer == r:
                    cls = PROC_FAILED
                elif req.peer == ANY_SOURCE and r in members:
                    cls = PROC_FAILED_PENDING
                else:
                    continue
                self._posted[(req.owner, req.channel)].remove(req)
                self._finish(req, RequestState.ERRORED, cls)

    # -- driver --------------------------------------------------------------

    def stop(self) -> None:
        """Abort the run after the current transition (used by the explorer)."""
        self._stop = True

    def run(self, chooser: Chooser) -> RunResult:
        truncated = False
        while True:
            if self._stop:
                break
            if self._step >= self.max_steps:
                truncated = True
                break
            procs = self.enabled()
            if not procs:
                if self._advance_clock():
                    continue
                break
            proc = chooser(procs, self)
            if self._stop:
                break
            if proc not in procs:
                raise ValueError(f"chooser picked disabled transition {proc}")
            self._execute(proc)
            if self.record_steps:
                forced = proc[0] == "kill" and not self.free_kills
                self.step_info.append(
                    StepInfo(
                        proc, tuple(procs), frozenset(self._reads), frozenset(self._writes),
                        frozenset(self._enablers), forced,
                    )
                )
            self._step += 1
            self.now += 1
        status = {r: st.status for r, st in enumerate(self._ranks)}
        blocked = sorted(r for r, s in status.items() if s in ("blocked", "ready"))
        deadlocked = bool(blocked) and not truncated and not self._stop
        if not self._stop:
            self.trace.add(
                self._step, "end",
                status="truncated" if truncated else ("deadlocked" if deadlocked else "ok"),
                blocked=blocked,
            )
        return RunResult(
            trace=self.trace,
            status=status,
            results={r: st.result for r, st in enumerate(self._ranks)},
            deadlocked=deadlocked,
            truncated=truncated,
            steps=self._step,
            requests=self.requests,
            envelopes=self.envelopes,
            step_info=self.step_info,
            stopped=self._stop,
        )


def seeded_chooser(seed: int) -> Chooser:
    """Pick uniformly among enabled transitions with a private RNG."""
    rng = random.Random(seed)

    def choose(procs: Sequence[Proc], sim: Simulator) -> Proc:
        if len(procs) == 1:
            return procs[0]
        return procs[rng.randrange(len(procs))]

    return choose


def run(
    programs: Sequence[Program],
    faults: FaultScript | None = None,
    seed: int = 0,
    liveness: bool = False,
    **kw: Any,
) -> RunResult:
    """Run all rank programs to termination, deadlock or step budget."""
    sim = Simulator(programs, faults=faults, liveness=liveness, **kw)
    return sim.run(seeded_chooser(seed))
