"""Scenarios, verdicts and schedule exploration for the propagation protocol.

A scenario is a small text file::

    name single-signaller
    ranks 4
    mode both
    program 0: signal 40
    program 1,2,3: irecv 0 5; wait
    expect outcome propagated
    expect report 0:40
    expect err_sends 3

Every rank acquires an instance, duplicates the world communicator and runs
its steps inside ``scoped``. Steps:

``isend <dest> <tag> [byte]``, ``irecv <src|any> <tag>``
    start a point-to-point future
``allreduce <value> [sum|max|band]``, ``barrier``
    start a collective future
``wait [k]``
    wait for future ``k``, or for every future not yet waited on
``signal <code>``, ``raise``, ``delay <k>``
    signal an error, leave the scope by an exception, yield ``k`` times
``shrink``
    last step only, ulfm only: after the outcome, shrink the communicator

Fault lines use the transport fault format. ``program *:`` applies to all
ranks; ranks without a program just enter and leave the scope.

Verdicts are extracted from the trace alone: each rank writes an
``outcome`` record before it releases its instance.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Mapping, Sequence

from .errors import CommError, ErrorReport
from .protocol import Instance
from .transport import (
    ANY_SOURCE,
    FaultParseError,
    FaultScript,
    RunResult,
    Simulator,
    Trace,
    seeded_chooser,
)
from .transport import explore as _explore
from .transport.faults import parse_fault_line
from .wire import ERR_TAG

MODES = ("black-channel", "ulfm")
HARD_FAULT_DIAGNOSTIC = "hard faults unsupported in black-channel mode"

OUTCOMES = ("success", "propagated", "corrupted", "transport-error", "killed", "blocked")


class ScenarioError(ValueError):
    """The scenario text is malformed or inconsistent."""


class UnsupportedScenario(ValueError):
    """The scenario cannot run in the requested mode."""


@dataclass(frozen=True)
class Step:
    op: str
    args: tuple[Any, ...] = ()

    def __str__(self) -> str:
        if self.op == "irecv" and self.args[0] == ANY_SOURCE:
            return f"irecv any {self.args[1]}"
        return " ".join([self.op, *map(str, self.args)])


_ARITY = {
    "isend": (2, 3),
    "irecv": (2, 2),
    "allreduce": (1, 2),
    "barrier": (0, 0),
    "wait": (0, 1),
    "signal": (1, 1),
    "raise": (0, 0),
    "delay": (1, 1),
    "shrink": (0, 0),
}


def parse_step(text: str) -> Step:
    words = text.split()
    if not words:
        raise ScenarioError("empty step")
    op, raw = words[0], words[1:]
    if op not in _ARITY:
        raise ScenarioError(f"unknown step {op!r}")
    lo, hi = _ARITY[op]
    if not lo <= len(raw) <= hi:
        raise ScenarioError(f"step {op!r} takes {lo}..{hi} arguments, got {len(raw)}")
    args: list[Any] = []
    for i, w in enumerate(raw):
        if op == "irecv" and i == 0 and w == "any":
            args.append(ANY_SOURCE)
        elif op == "allreduce" and i == 1:
            if w not in ("sum", "max", "band"):
                raise ScenarioError(f"unknown reduction {w!r}")
            args.append(w)
        else:
            try:
                args.append(int(w))
            except ValueError:
                raise ScenarioError(f"bad argument {w!r} in step {text!r}") from None
    return Step(op, tuple(args))


@dataclass(frozen=True)
class Expectation:
    key: str
    value: str
    rank: int | None = None

    def line(self) -> str:
        if self.rank is None:
            return f"expect {self.key} {self.value}"
        return f"expect {self.key} {self.rank} {self.value}"


@dataclass(frozen=True)
class Scenario:
    name: str
    n: int
    programs: tuple[tuple[Step, ...], ...]
    faults: FaultScript = FaultScript()
    mode: str = "both"
    expect: tuple[Expectation, ...] = ()

    def __post_init__(self):
        if self.n < 1:
            raise ScenarioError("a scenario needs at least one rank")
        if len(self.programs) != self.n:
            raise ScenarioError("one program per rank")
        if self.mode not in (*MODES, "both"):
            raise ScenarioError(f"unknown mode {self.mode!r}")
        for r, prog in enumerate(self.programs):
            for k, step in enumerate(prog):
                self._check_step(r, k, step, len(prog))
        for ev in self.faults.events:
            if not 0 <= ev.rank < self.n:
                raise ScenarioError(f"fault on rank {ev.rank} outside 0..{self.n - 1}")

    def _check_step(self, r: int, k: int, step: Step, length: int) -> None:
        if step.op in ("isend", "irecv"):
            peer = step.args[0]
            if peer != ANY_SOURCE and not 0 <= peer < self.n:
                raise ScenarioError(f"rank {r}: peer {peer} outside 0..{self.n - 1}")
            if step.args[1] < 0:
                raise ScenarioError(f"rank {r}: tags are non-negative")
        if step.op == "signal" and step.args[0] < 1:
            raise ScenarioError(f"rank {r}: error codes are positive")
        if step.op == "delay" and step.args[0] < 0:
            raise ScenarioError(f"rank {r}: negative delay")
        if step.op == "shrink" and k != length - 1:
            raise ScenarioError(f"rank {r}: shrink must be the last step")

    @property
    def has_kills(self) -> bool:
        return bool(self.faults.kills)

    @property
    def modes(self) -> tuple[str, ...]:
        return MODES if self.mode == "both" else (self.mode,)

    def with_mode(self, mode: str) -> "Scenario":
        return replace(self, mode=mode)

    def dumps(self) -> str:
        lines = [f"name {self.name}", f"ranks {self.n}", f"mode {self.mode}"]
        for r, prog in enumerate(self.programs):
            if prog:
                lines.append(f"program {r}: " + "; ".join(map(str, prog)))
        lines.extend(ev.to_line() for ev in self.faults.events)
        lines.extend(e.line() for e in self.expect)
        return "\n".join(lines) + "\n"


def _rank_list(text: str, n: int) -> list[int]:
    if text == "*":
        return list(range(n))
    out: list[int] = []
    for part in text.split(","):
        m = re.fullmatch(r"(\d+)(?:-(\d+))?", part.strip())
        if not m:
            raise ScenarioError(f"bad rank list {text!r}")
        lo = int(m.group(1))
        hi = int(m.group(2)) if m.group(2) else lo
        out.extend(range(lo, hi + 1))
    for r in out:
        if not 0 <= r < n:
            raise ScenarioError(f"rank {r} outside 0..{n - 1}")
    return out


def parse_scenario(text: str, name: str = "scenario") -> Scenario:
    n: int | None = None
    mode = "both"
    programs: dict[int, tuple[Step, ...]] = {}
    events = []
    expect: list[Expectation] = []
    pending_programs: list[tuple[str, str]] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            head, _, rest = line.partition(" ")
            rest = rest.strip()
            if head == "name":
                name = rest
            elif head == "ranks":
                n = int(rest)
            elif head == "mode":
                mode = rest
            elif head == "program":
                who, sep, body = rest.partition(":")
                if not sep:
                    raise ScenarioError("program line needs ':'")
                pending_programs.append((who.strip(), body))
            elif head == "expect":
                words = rest.split()
                if len(words) == 2:
                    expect.append(Expectation(words[0], words[1]))
                elif len(words) == 3:
                    expect.append(Expectation(words[0], words[2], int(words[1])))
                else:
                    raise ScenarioError("expect takes a key, an optional rank and a value")
            elif head[:1].isdigit():
                events.append(parse_fault_line(line))
            else:
                raise ScenarioError(f"unknown directive {head!r}")
        except (ScenarioError, FaultParseError, ValueError) as exc:
            raise ScenarioError(f"line {lineno}: {exc}") from None
    if n is None:
        raise ScenarioError("missing 'ranks' line")
    for who, body in pending_programs:
        steps = tuple(parse_step(s) for s in body.split(";") if s.strip())
        for r in _rank_list(who, n):
            programs[r] = steps
    for e in expect:
        if e.key not in _EXPECT_KEYS:
            raise ScenarioError(f"unknown expectation {e.key!r}")
    try:
        faults = FaultScript.of(events)
    except ValueError as exc:
        raise ScenarioError(str(exc)) from None
    return Scenario(
        name=name,
        n=n,
        programs=tuple(programs.get(r, ()) for r in range(n)),
        faults=faults,
        mode=mode,
        expect=tuple(expect),
    )


# -- verdicts ---------------------------------------------------------------------


@dataclass(frozen=True)
class Verdict:
    """What one execution of a scenario did, read back from its trace."""

    outcomes: tuple[str, ...]
    reports: tuple[str | None, ...]
    deadlocked: bool
    leaks: int
    messages: tuple[tuple[str, int], ...]
    err_sends: int
    shrink: tuple[tuple[int, ...] | None, ...] = ()
    steps: int = field(default=0, compare=False)

    @property
    def message_counts(self) -> dict[str, int]:
        return dict(self.messages)

    def as_dict(self) -> dict[str, Any]:
        return {
            "outcomes": list(self.outcomes),
            "reports": list(self.reports),
            "deadlocked": self.deadlocked,
            "leaks": self.leaks,
            "messages": dict(self.messages),
            "err_sends": self.err_sends,
            "shrink": [list(g) if g is not None else None for g in self.shrink],
            "steps": self.steps,
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True)

    def uniform(self) -> bool:
        """Same outcome and report on every rank that was not killed."""
        live = [(o, r) for o, r in zip(self.outcomes, self.reports) if o != "killed"]
        return len(set(live)) <= 1


def verdict_from_trace(trace: Trace, n: int, deadlocked: bool, steps: int = 0) -> Verdict:
    outcomes = ["blocked"] * n
    reports: list[str | None] = [None] * n
    shrink: list[tuple[int, ...] | None] = [None] * n
    roles: dict[tuple[int, int], str] = {}
    sends: Counter[str] = Counter()
    err_sends = leaks = 0
    for rec in trace:
        if rec.kind == "chan":
            roles[(rec["rank"], rec["ch"])] = rec["role"]
        elif rec.kind == "send":
            role = roles.get((rec["src"], rec["ch"]), "data")
            sends[role] += 1
            if role == "err" and rec["tag"] == ERR_TAG:
                err_sends += 1
        elif rec.kind == "leak":
            leaks += rec["count"]
        elif rec.kind == "outcome":
            outcomes[rec["rank"]] = rec["variant"]
            reports[rec["rank"]] = rec["report"] or None
        elif rec.kind == "recovered":
            shrink[rec["rank"]] = tuple(rec["group"])
        elif rec.kind == "kill":
            outcomes[rec["rank"]] = "killed"
    return Verdict(
        outcomes=tuple(outcomes),
        reports=tuple(reports),
        deadlocked=deadlocked,
        leaks=leaks,
        messages=tuple(sorted(sends.items())),
        err_sends=err_sends,
        shrink=tuple(shrink),
        steps=steps,
    )


# -- execution ----------------------------------------------------------------------


class _Unwind(Exception):
    pass


def _rank_program(steps: Sequence[Step], mode: str):
    recover = bool(steps) and steps[-1].op == "shrink"
    body_steps = steps[:-1] if recover else steps

    def program(ep):
        inst = Instance.acquire(ep, mode)
        comm = inst.world.duplicate()
        futures: list = []
        waited = 0

        def body():
            nonlocal waited
            for step in body_steps:
                op, a = step.op, step.args
                if op == "isend":
                    payload = bytes([a[2] & 0xFF]) if len(a) > 2 else b""
                    futures.append(comm.isend(a[0], a[1], payload))
                elif op == "irecv":
                    futures.append(comm.irecv(a[0], a[1]))
                elif op == "allreduce":
                    futures.append(comm.all_reduce(a[0], a[1] if len(a) > 1 else "sum"))
                elif op == "barrier":
                    futures.append(comm.barrier())
                elif op == "wait":
                    if a:
                        yield from futures[a[0]].wait()
                    else:
                        while waited < len(futures):
                            yield from futures[waited].wait()
                            waited += 1
                elif op == "signal":
                    yield from comm.signal_error(a[0])
                elif op == "raise":
                    raise _Unwind()
                elif op == "delay":
                    for _ in range(a[0]):
                        yield from ep.pause()

        report = ""
        try:
            yield from comm.scoped(body())
            variant = "success"
        except CommError as exc:
            variant = exc.variant
            if getattr(exc, "report", None) is not None:
                report = str(exc.report)
        except _Unwind:
            variant = comm.outcome.variant if comm.outcome is not None else "success"
            if getattr(comm.outcome, "report", None) is not None:
                report = str(comm.outcome.report)
        if recover and variant != "success":
            new = yield from comm.shrink()
            ep.record("recovered", group=new.group)
        ep.record("outcome", variant=variant, report=report)
        inst.release()
        return variant

    return program


def _check_runnable(s: Scenario, mode: str) -> None:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if mode == "black-channel" and s.has_kills:
        raise UnsupportedScenario(HARD_FAULT_DIAGNOSTIC)
    if mode == "black-channel" and any(p and p[-1].op == "shrink" for p in s.programs):
        raise UnsupportedScenario("shrink needs ulfm mode")


def _resolve_mode(s: Scenario, mode: str | None) -> str:
    if mode is None:
        if s.mode == "both":
            raise ValueError("scenario runs in both modes; pick one")
        mode = s.mode
    _check_runnable(s, mode)
    return mode


def make_simulator(s: Scenario, mode: str, **kw: Any) -> Simulator:
    programs = [_rank_program(p, mode) for p in s.programs]
    return Simulator(programs, faults=s.faults, liveness=(mode == "ulfm"), **kw)


def verdict_of(s: Scenario, result: RunResult) -> Verdict:
    return verdict_from_trace(result.trace, s.n, result.deadlocked, result.steps)


@dataclass
class Run:
    verdict: Verdict
    result: RunResult
    mode: str


def run_scenario_full(s: Scenario, seed: int = 0, mode: str | None = None) -> Run:
    mode = _resolve_mode(s, mode)
    result = make_simulator(s, mode).run(seeded_chooser(seed))
    return Run(verdict_of(s, result), result, mode)


def run_scenario(s: Scenario, seed: int = 0, mode: str | None = None) -> Verdict:
    return run_scenario_full(s, seed, mode).verdict


@dataclass
class ExploreResult:
    verdicts: set[Verdict]
    partial: bool
    executions: int
    mode: str


def explore(
    s: Scenario,
    budget: int = 5_000,
    mode: str | None = None,
    max_executions: int = 20_000,
    reduction: str = "dpor",
) -> ExploreResult:
    """Verdicts of every schedule of at most ``budget`` transitions, up to
    ``max_executions`` runs. ``partial`` is set when either bound cut the
    search short."""
    mode = _resolve_mode(s, mode)
    verdicts: set[Verdict] = set()
    er = _explore(
        lambda: make_simulator(s, mode),
        reduction=reduction,
        max_executions=max_executions,
        max_depth=budget,
        keep_runs=False,
        on_run=lambda r: verdicts.add(replace(verdict_of(s, r), steps=0)),
    )
    return ExploreResult(verdicts, er.partial, er.executions, mode)


def oracle_failed_ranks(failed: Mapping[int, int]) -> ErrorReport:
    """The report ``determine_failed`` must produce, built directly."""
    if not failed:
        raise ValueError("no failed ranks")
    return ErrorReport(tuple(sorted(failed.items())))


# -- expectations ------------------------------------------------------------------------


def _check_outcome(v: Verdict, e: Expectation) -> list[str]:
    ranks = [e.rank] if e.rank is not None else [r for r, o in enumerate(v.outcomes) if o != "killed"]
    return [f"rank {r}: outcome {v.outcomes[r]}, expected {e.value}" for r in ranks if v.outcomes[r] != e.value]


def _check_report(v: Verdict, e: Expectation) -> list[str]:
    ranks = [e.rank] if e.rank is not None else [r for r, o in enumerate(v.outcomes) if o == "propagated"]
    if e.rank is None and not ranks:
        return ["no rank has a report"]
    return [f"rank {r}: report {v.reports[r]}, expected {e.value}" for r in ranks if v.reports[r] != e.value]


def _compare(actual: int, want: str, what: str) -> list[str]:
    m = re.fullmatch(r"(>=|<=|>|<|=)?(\d+)", want)
    if not m:
        return [f"bad expectation value {want!r} for {what}"]
    op, num = m.group(1) or "=", int(m.group(2))
    ok = {
        "=": actual == num, ">": actual > num, "<": actual < num,
        ">=": actual >= num, "<=": actual <= num,
    }[op]
    return [] if ok else [f"{what} {actual}, expected {want}"]


def _check_shrink(v: Verdict, e: Expectation) -> list[str]:
    want = tuple(int(x) for x in e.value.split(",")) if e.value != "-" else None
    ranks = [e.rank] if e.rank is not None else [r for r, o in enumerate(v.outcomes) if o != "killed"]
    return [f"rank {r}: shrink group {v.shrink[r]}, expected {want}" for r in ranks if v.shrink[r] != want]


_EXPECT_KEYS = {
    "outcome": _check_outcome,
    "report": _check_report,
    "deadlocked": lambda v, e: [] if str(v.deadlocked).lower() == e.value.lower() else [
        f"deadlocked {v.deadlocked}, expected {e.value}"
    ],
    "leak": lambda v, e: _compare(v.leaks, e.value, "leak count"),
    "err_sends": lambda v, e: _compare(v.err_sends, e.value, "err sends"),
    "messages": lambda v, e: _compare(sum(c for _, c in v.messages), e.value, "messages"),
    "shrink": _check_shrink,
}


def check_expectations(v: Verdict, expect: Iterable[Expectation]) -> list[str]:
    """Mismatches between a verdict and an expectation block; empty if it
    matches."""
    out: list[str] = []
    for e in expect:
        out.extend(_EXPECT_KEYS[e.key](v, e))
    return out


# -- built-in scenarios -------------------------------------------------------------------


def _progs(n: int, by_rank: Mapping[int, str], default: str = "") -> tuple[tuple[Step, ...], ...]:
    def steps(text: str) -> tuple[Step, ...]:
        return tuple(parse_step(s) for s in text.split(";") if s.strip())

    return tuple(steps(by_rank.get(r, default)) for r in range(n))


def ping_pong() -> Scenario:
    return Scenario(
        "ping-pong", 2,
        _progs(2, {0: "isend 1 0 7; irecv 1 1; wait", 1: "irecv 0 0; wait; isend 0 1 8; wait"}),
        expect=(Expectation("outcome", "success"), Expectation("leak", "0"), Expectation("err_sends", "0")),
    )


def single_signaller(n: int, code: int = 40, signaller: int = 0) -> Scenario:
    return Scenario(
        f"single-signaller-{n}", n,
        _progs(n, {signaller: f"signal {code}"}, f"irecv {signaller} 5; wait"),
        expect=(
            Expectation("outcome", "propagated"),
            Expectation("report", f"{signaller}:{code}"),
            Expectation("deadlocked", "false"),
        ),
    )


def simultaneous_signallers(n: int, signallers: Sequence[int], codes: Sequence[int] | None = None) -> Scenario:
    codes = list(codes) if codes is not None else [7 + 2 * i for i in range(len(signallers))]
    waiter = f"irecv {signallers[0]} 5; wait"
    report = ",".join(f"{r}:{c}" for r, c in sorted(zip(signallers, codes)))
    return Scenario(
        f"signallers-{n}-" + "-".join(map(str, signallers)), n,
        _progs(n, {r: f"signal {c}" for r, c in zip(signallers, codes)}, waiter),
        expect=(Expectation("outcome", "propagated"), Expectation("report", report), Expectation("deadlocked", "false")),
    )


def unwind(n: int, thrower: int = 0) -> Scenario:
    return Scenario(
        f"unwind-{n}", n,
        _progs(n, {thrower: "raise"}, f"irecv {thrower} 5; wait"),
        expect=(Expectation("outcome", "corrupted"), Expectation("deadlocked", "false")),
    )


def mixed(n: int, signaller: int = 0, thrower: int = 1, code: int = 3) -> Scenario:
    return Scenario(
        f"mixed-{n}", n,
        _progs(n, {signaller: f"signal {code}", thrower: "raise"}, f"irecv {signaller} 5; wait"),
        expect=(Expectation("outcome", "corrupted"), Expectation("deadlocked", "false")),
    )


def kill_rank(n: int, victim: int, time: int = 3) -> Scenario:
    from .transport import FaultEvent

    waiter = f"irecv {victim} 5; wait; shrink"
    survivors = ",".join(str(r) for r in range(n) if r != victim)
    return Scenario(
        f"kill-rank-{n}-{victim}", n,
        _progs(n, {}, waiter),
        faults=FaultScript.of([FaultEvent(time, victim, "kill")]),
        mode="ulfm",
        expect=(Expectation("outcome", "corrupted"), Expectation("shrink", survivors)),
    )


def error_mid_collective(n: int, signaller: int = 0, code: int = 11) -> Scenario:
    # everyone else is inside an allreduce the signaller never joins
    return Scenario(
        f"error-mid-collective-{n}", n,
        _progs(n, {signaller: f"signal {code}"}, "allreduce 1; wait"),
        mode="black-channel",
        expect=(Expectation("outcome", "propagated"), Expectation("leak", ">0")),
    )


def fault_free(n: int) -> Scenario:
    ring = {r: f"isend {(r + 1) % n} 0 {r}; irecv {(r - 1) % n} 0; allreduce {r}; barrier; wait" for r in range(n)}
    return Scenario(
        f"fault-free-{n}", n, _progs(n, ring),
        expect=(Expectation("outcome", "success"), Expectation("leak", "0"), Expectation("err_sends", "0")),
    )


def builtin_scenarios() -> dict[str, Scenario]:
    out = {
        "ping-pong": ping_pong(),
        "single-signaller": single_signaller(4),
        "simultaneous-signallers": simultaneous_signallers(3, [1, 2]),
        "unwind": unwind(3),
        "mixed": mixed(3),
        "kill-rank": kill_rank(3, 1),
        "error-mid-collective": error_mid_collective(3),
        "fault-free": fault_free(4),
    }
    return {k: replace(v, name=k) for k, v in out.items()}
