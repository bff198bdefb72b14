"""Schedule exploration over the simulator.

Stateless search: every execution replays the simulator from scratch along
a prefix of recorded choices. With ``reduction="none"`` every enabled
transition is branched on at every step, which enumerates all interleavings.
With ``reduction="dpor"`` (the default) the explorer runs optimal dynamic
partial-order reduction: sleep sets plus wakeup trees built from the races
of each finished execution, so that one interleaving per class of runs that
differ only in the order of commuting transitions is executed.

Delay faults are ignored while exploring because every delivery delay is
already among the explored interleavings. Kills become ordinary transitions
enabled from their scheduled time on, so every placement of a kill at or
after that time is explored too.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

from .simulator import WILDCARD, Proc, RunResult, Simulator, StepInfo


def dependent(a: StepInfo, b: StepInfo) -> bool:
    if WILDCARD in a.writes or WILDCARD in b.writes:
        return True
    return bool(a.writes & (b.reads | b.writes)) or bool(b.writes & a.reads)


@dataclass
class _Node:
    """Wakeup-tree node: a step to take, with the footprint it had when the
    race asking for it was found."""

    proc: Proc
    info: StepInfo | None
    children: list["_Node"] = field(default_factory=list)


@dataclass
class _Frame:
    enabled: tuple[Proc, ...]
    chosen: Proc
    # sleep set when the state was first entered
    sleep: dict[Proc, StepInfo]
    # pending wakeup tree below this state, leftmost first
    pending: list[_Node] = field(default_factory=list)
    # branches fully explored from this state, with their footprints
    finished: dict[Proc, StepInfo] = field(default_factory=dict)
    chosen_info: StepInfo | None = None

    def asleep(self) -> dict[Proc, StepInfo]:
        out = dict(self.sleep)
        out.update(self.finished)
        return out


@dataclass
class ExplorationResult:
    executions: int
    complete: bool
    runs: list[RunResult] = field(default_factory=list)
    sleep_blocked: int = 0
    max_depth: int = 0

    @property
    def partial(self) -> bool:
        return not self.complete


@dataclass
class _Event:
    idx: int
    proc: Proc
    info: StepInfo


class Explorer:
    def __init__(
        self,
        make_sim: Callable[[], Simulator],
        reduction: str = "dpor",
        max_executions: int = 10_000,
        max_depth: int = 5_000,
        keep_runs: bool = True,
        on_run: Callable[[RunResult], Any] | None = None,
    ):
        if reduction not in ("dpor", "none"):
            raise ValueError(f"unknown reduction {reduction!r}")
        self.make_sim = make_sim
        self.reduction = reduction
        self.max_executions = max_executions
        self.max_depth = max_depth
        self.keep_runs = keep_runs
        self.on_run = on_run

    def explore(self) -> ExplorationResult:
        frames: list[_Frame] = []
        result = ExplorationResult(executions=0, complete=True)
        subtree: list[_Node] = []
        while True:
            if result.executions >= self.max_executions:
                result.complete = False
                break
            run, blocked, depth_hit = self._execute(frames, subtree)
            result.executions += 1
            result.max_depth = max(result.max_depth, len(frames))
            if depth_hit:
                result.complete = False
            if blocked:
                result.sleep_blocked += 1
            elif run is not None:
                if self.keep_runs:
                    result.runs.append(run)
                if self.on_run is not None:
                    self.on_run(run)
            subtree = self._backtrack(frames)
            if not frames:
                break
        return result

    @staticmethod
    def _backtrack(frames: list[_Frame]) -> list[_Node]:
        """Move to the deepest state with a pending branch and return the
        wakeup subtree to follow below it."""
        while frames:
            top = frames[-1]
            if top.chosen_info is not None:
                top.finished[top.chosen] = top.chosen_info
            top.chosen_info = None
            while top.pending:
                node = top.pending.pop(0)
                if node.proc in top.enabled and node.proc not in top.asleep():
                    top.chosen = node.proc
                    return node.children
            frames.pop()
        return []

    def _execute(self, frames: list[_Frame], subtree: list[_Node]):
        sim = self.make_sim()
        sim.record_steps = True
        sim.honor_delays = False
        sim.free_kills = True
        prefix_len = len(frames)
        state = {"blocked": False, "depth_hit": False}
        sleep: dict[Proc, StepInfo] = {}
        todo = [subtree]

        def choose(procs: Sequence[Proc], s: Simulator) -> Proc:
            nonlocal sleep
            depth = len(rec)
            doomed = {ev.rank for ev in s._kills}
            if depth >= self.max_depth:
                state["depth_hit"] = True
                s.stop()
                return procs[0]
            if depth < prefix_len:
                frame = frames[depth]
                if tuple(procs) != frame.enabled:
                    raise RuntimeError(
                        f"nondeterministic replay at depth {depth}: {procs} != {frame.enabled}"
                    )
                if depth == prefix_len - 1 and self.reduction == "dpor":
                    sleep = _strip(frame.asleep(), doomed)
                    sleep.pop(frame.chosen, None)
                return frame.chosen
            if self.reduction == "none":
                frames.append(_Frame(tuple(procs), procs[0], {}, [_Node(p, None) for p in procs[1:]]))
                return procs[0]
            sleep = _strip(sleep, doomed)
            nodes = todo[0]
            while nodes and (nodes[0].proc not in procs or nodes[0].proc in sleep):
                nodes.pop(0)
            if nodes:
                node = nodes.pop(0)
                frames.append(_Frame(tuple(procs), node.proc, dict(sleep), nodes))
                todo[0] = node.children
                return node.proc
            awake = [p for p in procs if p not in sleep]
            if not awake:
                state["blocked"] = True
                s.stop()
                return procs[0]
            frames.append(_Frame(tuple(procs), awake[0], dict(sleep)))
            todo[0] = []
            return awake[0]

        class _Recorder(list):
            def append(inner, info: StepInfo) -> None:  # noqa: N805
                nonlocal sleep
                list.append(inner, info)
                idx = len(inner) - 1
                if idx < len(frames):
                    frames[idx].chosen_info = info
                if sleep:
                    sleep = {p: i for p, i in sleep.items() if p != info.proc and not dependent(i, info)}

        rec = _Recorder()
        sim.step_info = rec
        run = sim.run(choose)
        if self.reduction == "dpor":
            self._analyse(list(rec), frames)
        if state["blocked"]:
            return None, True, state["depth_hit"]
        return run, False, state["depth_hit"]

    # -- race analysis -----------------------------------------------------------

    def _analyse(self, infos: list[StepInfo], frames: list[_Frame]) -> None:
        hb: list[int] = []
        last_write: dict[Any, int] = {}
        reads_since: dict[Any, list[int]] = {}
        last_of_proc: dict[Proc, int] = {}
        last_forced = -1
        for i, info in enumerate(infos):
            edges: set[int] = set(info.enablers)
            prev = last_of_proc.get(info.proc)
            if prev is not None:
                edges.add(prev)
            if last_forced >= 0:
                edges.add(last_forced)
            candidates: set[int] = set()
            if WILDCARD in info.writes:
                candidates.update(range(i))
            else:
                wild = last_write.get(WILDCARD)
                if wild is not None:
                    candidates.add(wild)
                for obj in info.reads | info.writes:
                    w = last_write.get(obj)
                    if w is not None:
                        candidates.add(w)
                for obj in info.writes:
                    candidates.update(reads_since.get(obj, ()))
            candidates.discard(i)
            all_edges = edges | candidates
            closure = 0
            for e in all_edges:
                closure |= hb[e] | (1 << e)
            hb.append(closure)

            if info.proc[0] == "kill" and not info.forced and i < len(frames):
                # a kill disables its victim, which race reversal cannot see
                victim = ("run", info.proc[1])
                frame = frames[i]
                if victim in frame.enabled and victim not in frame.asleep():
                    if all(n.proc != victim for n in frame.pending):
                        frame.pending.append(_Node(victim, None))
            if not info.forced:
                for j in sorted(candidates):
                    if j in info.enablers or infos[j].forced or infos[j].proc == info.proc:
                        continue
                    if j >= len(frames):
                        continue
                    others = 0
                    for e in all_edges:
                        if e != j:
                            others |= hb[e] | (1 << e)
                    if (others >> j) & 1:
                        continue
                    self._reverse(frames[j], j, i, infos, hb)

            last_of_proc[info.proc] = i
            if info.forced or WILDCARD in info.writes:
                last_forced = i
            for obj in info.writes:
                last_write[obj] = i
                reads_since[obj] = []
            for obj in info.reads - info.writes:
                reads_since.setdefault(obj, []).append(i)

    @staticmethod
    def _reverse(frame: _Frame, j: int, i: int, infos: list[StepInfo], hb: list[int]) -> None:
        """Schedule the reversal of the race between steps ``j`` and ``i``
        below the state before ``j``: the steps after ``j`` that do not
        depend on it, followed by ``i``."""
        w = [_Event(k, infos[k].proc, infos[k]) for k in range(j + 1, i) if not (hb[k] >> j) & 1]
        w.append(_Event(i, infos[i].proc, infos[i]))
        for proc, info in frame.asleep().items():
            if _weak_initial(proc, info, w, hb):
                return
        if frame.chosen_info is not None and _weak_initial(frame.chosen, frame.chosen_info, w, hb):
            return
        # a wake-up from a wait on alternatives carries no enablers, so the
        # race may be with the step that enabled it; nothing to reverse then
        if w[0].proc not in frame.enabled:
            return
        _insert(frame.pending, w, hb, frame.enabled)


def _strip(sleep: dict[Proc, StepInfo], doomed: set[int]) -> dict[Proc, StepInfo]:
    """Drop the steps of ranks a pending kill may still disable: a sleeping
    step is assumed to stay enabled, which a kill breaks."""
    if not doomed:
        return sleep
    return {p: i for p, i in sleep.items() if not (p[0] == "run" and p[1] in doomed)}


def _weak_initial(proc: Proc, info: StepInfo | None, w: list[_Event], hb: list[int]) -> bool:
    """Can ``proc`` go first in some reordering of ``w``?"""
    for pos, ev in enumerate(w):
        if ev.proc == proc:
            return not any((hb[ev.idx] >> other.idx) & 1 for other in w[:pos])
    if info is None:
        return False
    return not any(dependent(info, ev.info) for ev in w)


def _insert(nodes: list[_Node], w: list[_Event], hb: list[int], enabled: Sequence[Proc]) -> None:
    top = True
    while True:
        for node in nodes:
            if top and node.proc not in enabled:
                continue
            if _weak_initial(node.proc, node.info, w, hb):
                if not node.children:
                    return
                w = _without_first(w, node.proc)
                nodes = node.children
                top = False
                break
        else:
            for ev in w:
                child = _Node(ev.proc, ev.info)
                nodes.append(child)
                nodes = child.children
            return


def _without_first(w: list[_Event], proc: Proc) -> list[_Event]:
    for pos, ev in enumerate(w):
        if ev.proc == proc:
            return w[:pos] + w[pos + 1 :]
    return w


def explore(
    make_sim: Callable[[], Simulator],
    reduction: str = "dpor",
    max_executions: int = 10_000,
    max_depth: int = 5_000,
    **kw: Any,
) -> ExplorationResult:
    return Explorer(make_sim, reduction, max_executions, max_depth, **kw).explore()
