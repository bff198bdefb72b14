from __future__ import annotations

import copy

import pytest

from faultprop.errors import (
    CommError,
    CorruptedCommError,
    ErrorReport,
    PropagatedError,
    ProtocolViolation,
    TransportError,
    UsageError,
)
from faultprop.protocol import CommState, Instance, Received, determine_failed
from faultprop.transport import ANY_SOURCE, RequestState, SimulationCrash, Simulator, explore, run
from faultprop.wire import ERR_TAG


def spmd(n, body, mode="black-channel", seed=0, explore_all=False, **kw):
    """Run ``body(comm, ep)`` on every rank inside a duplicated world
    communicator; each rank returns ("ok", value) or (variant, report)."""

    def prog(ep):
        inst = Instance.acquire(ep, mode)
        comm = inst.world.duplicate()
        try:
            value = yield from comm.scoped(body(comm, ep))
            out = ("ok", value)
        except CommError as exc:
            out = (exc.variant, str(getattr(exc, "report", "")))
        except _Boom:
            out = ("raised", comm.outcome.variant)
        inst.release()
        return out

    liveness = mode == "ulfm"
    if explore_all:
        return explore(lambda: Simulator([prog] * n, liveness=liveness, **kw))
    return run([prog] * n, seed=seed, liveness=liveness, **kw)


class _Boom(Exception):
    pass


def _err_sends(res):
    err_channels = {(r["rank"], r["ch"]) for r in res.trace.of_kind("chan") if r["role"] == "err"}
    return [r for r in res.trace.of_kind("send") if (r["src"], r["ch"]) in err_channels and r["tag"] == ERR_TAG]


# -- instance ---------------------------------------------------------------------------


def test_instance_owns_runtime_and_finalises():
    def prog(ep):
        inst = Instance.acquire(ep)
        owns = inst.owns_runtime
        inst.release()
        return owns, ep.runtime_initialized
        yield

    res = run([prog])
    assert res.results[0] == (True, False)
    assert [r.kind for r in res.trace if r.kind in ("init", "finalize")] == ["init", "finalize"]


def test_instance_on_preinitialised_runtime_skips_finalise():
    def prog(ep):
        with Instance.acquire(ep) as inst:
            owns = inst.owns_runtime
        return owns, ep.runtime_initialized
        yield

    res = run([prog], preinitialized=True)
    assert res.results[0] == (False, True)
    assert not res.trace.of_kind("finalize")


def test_second_instance_is_refused():
    def prog(ep):
        Instance.acquire(ep)
        Instance.acquire(ep)
        yield

    with pytest.raises(SimulationCrash) as info:
        run([prog])
    assert isinstance(info.value.__cause__, UsageError)


def test_instance_can_be_reacquired_after_release():
    def prog(ep):
        Instance.acquire(ep).release()
        Instance.acquire(ep).release()
        return "ok"
        yield

    assert run([prog]).results[0] == "ok"


def test_ulfm_needs_liveness():
    def prog(ep):
        Instance.acquire(ep, "ulfm")
        yield

    with pytest.raises(SimulationCrash):
        run([prog])


# -- duplicate --------------------------------------------------------------------------


@pytest.mark.parametrize("mode,channels,pending", [("black-channel", 2, 1), ("ulfm", 1, 0)])
def test_duplicate_resources(mode, channels, pending):
    def prog(ep):
        with Instance.acquire(ep, mode) as inst:
            before = ep.channels_allocated
            comm = inst.world.duplicate()
            used = ep.channels_allocated - before
            own = [comm.err_recv] if comm.err_recv is not None else []
            live = sum(1 for r in own if ep.test(r) is RequestState.PENDING)
            return used, live
        yield

    res = run([prog] * 4, liveness=mode == "ulfm")
    assert set(res.results.values()) == {(channels, pending)}


def test_communicator_is_not_copyable():
    def prog(ep):
        with Instance.acquire(ep) as inst:
            with pytest.raises(TypeError):
                copy.copy(inst.world)
        return "ok"
        yield

    assert run([prog]).results[0] == "ok"


def test_duplicate_closed_communicator_is_usage_error():
    def prog(ep):
        inst = Instance.acquire(ep)
        comm = inst.world.duplicate()
        try:
            yield from comm.signal_error(1)
        except PropagatedError:
            pass
        with pytest.raises(UsageError):
            comm.duplicate()
        inst.release()
        return "ok"

    assert run([prog]).results[0] == "ok"


# -- point to point ----------------------------------------------------------------------


def test_matched_pair_succeeds():
    def body(comm, ep):
        if comm.rank == 0:
            return (yield from comm.isend(1, 3, b"hi").wait())
        got = yield from comm.irecv(ANY_SOURCE, 3).wait()
        return got

    res = spmd(2, body)
    assert res.results == {0: ("ok", None), 1: ("ok", Received(b"hi", 0))}
    assert not _err_sends(res)


def test_future_waits_once():
    def body(comm, ep):
        f = comm.isend((comm.rank + 1) % 2, 0, b"")
        g = comm.irecv((comm.rank + 1) % 2, 0)
        yield from f.wait()
        yield from g.wait()
        with pytest.raises(UsageError):
            yield from f.wait()
        return "done"

    assert set(spmd(2, body).results.values()) == {("ok", "done")}


def test_negative_user_tags_rejected():
    def body(comm, ep):
        with pytest.raises(ValueError):
            comm.isend(0, -1, b"")
        return "ok"
        yield

    assert spmd(1, body).results[0] == ("ok", "ok")


def test_truncated_receive_is_transport_error():
    def body(comm, ep):
        if comm.rank == 0:
            yield from comm.isend(1, 0, b"abcdef").wait()
            return None
        try:
            yield from comm.irecv(0, 0, capacity=2).wait()
        except TransportError as exc:
            return exc.cls

    res = spmd(2, body)
    assert res.results == {0: ("ok", None), 1: ("ok", "truncation")}


# -- signalling ----------------------------------------------------------------------------


def _signaller_body(signallers, codes=None, waiter_source=None):
    codes = codes or {}

    def body(comm, ep):
        if comm.rank in signallers:
            yield from comm.signal_error(codes.get(comm.rank, 40 + comm.rank))
        src = waiter_source if waiter_source is not None else signallers[0]
        yield from comm.irecv(src, 5).wait()

    return body


def test_single_signaller_reaches_everyone():
    res = spmd(4, _signaller_body([0], {0: 42}), seed=5)
    assert set(res.results.values()) == {("propagated", "0:42")}
    assert len(_err_sends(res)) == 3


def test_signal_on_size_one_communicator():
    res = spmd(1, _signaller_body([0], {0: 5}))
    assert res.results[0] == ("propagated", "0:5")
    assert not _err_sends(res)


@pytest.mark.parametrize("seed", range(8))
def test_two_signallers_of_eight(seed):
    res = spmd(8, _signaller_body([1, 3], {1: 7, 3: 9}), seed=seed)
    assert not res.deadlocked
    assert set(res.results.values()) == {("propagated", "1:7,3:9")}


def test_two_signallers_every_schedule():
    er = spmd(3, _signaller_body([0, 2], {0: 7, 2: 9}, waiter_source=0), explore_all=True)
    assert er.complete
    assert {tuple(r.results.values()) for r in er.runs} == {(("propagated", "0:7,2:9"),) * 3}
    assert not any(r.deadlocked for r in er.runs)


def test_request_and_error_race_always_propagates():
    # rank 1 only waits once both the data and the error notice are in, so
    # the wait wakes with both completed; the post-completion test decides
    def body(comm, ep):
        if comm.rank == 0:
            comm.isend(1, 0, b"d")
            yield from comm.signal_error(8)
        fut = comm.irecv(0, 0)
        yield from ep.wait_all([fut.request, comm.err_recv])
        return (yield from fut.wait())

    er = spmd(2, body, explore_all=True)
    assert er.complete and er.executions > 1
    assert {tuple(r.results.values()) for r in er.runs} == {(("propagated", "0:8"),) * 2}


def test_signal_on_closed_communicator_is_usage_error():
    def prog(ep):
        inst = Instance.acquire(ep)
        comm = inst.world.duplicate()
        try:
            yield from comm.signal_error(3)
        except PropagatedError:
            pass
        assert comm.state is CommState.CLOSED
        with pytest.raises(UsageError):
            yield from comm.signal_error(3)
        inst.release()
        return "ok"

    assert run([prog, prog]).results == {0: "ok", 1: "ok"}


def test_signal_code_must_be_valid():
    def body(comm, ep):
        with pytest.raises(ValueError):
            yield from comm.signal_error(0)
        return "ok"

    assert spmd(1, body).results[0] == ("ok", "ok")


def test_wait_on_closed_communicator_is_corrupted():
    def prog(ep):
        inst = Instance.acquire(ep)
        comm = inst.world.duplicate()
        fut = None
        try:
            if ep.rank == 0:
                yield from comm.signal_error(2)
            fut = comm.irecv(0, 1)
            yield from fut.wait()
        except PropagatedError:
            pass
        late = comm.irecv(0, 2)
        try:
            yield from late.wait()
        except CorruptedCommError:
            inst.release()
            return "closed"

    assert set(run([prog, prog]).results.values()) == {"closed"}


# -- corruption -------------------------------------------------------------------------------


def test_unwinding_rank_corrupts_everyone():
    def body(comm, ep):
        if comm.rank == 2:
            raise _Boom()
        yield from comm.irecv(2, 0).wait()

    res = spmd(4, body, seed=1)
    assert res.results[2] == ("raised", "corrupted")
    assert all(res.results[r] == ("corrupted", "") for r in (0, 1, 3))


def test_mixed_signal_and_unwind_every_schedule():
    def body(comm, ep):
        if comm.rank == 0:
            yield from comm.signal_error(3)
        if comm.rank == 1:
            raise _Boom()
        yield from comm.irecv(0, 0).wait()

    er = spmd(3, body, explore_all=True)
    assert er.complete
    for r in er.runs:
        assert not r.deadlocked
        assert r.results[0] == ("corrupted", "")
        assert r.results[1] == ("raised", "corrupted")
        assert r.results[2] == ("corrupted", "")


def test_clean_scope_exit_is_silent():
    def body(comm, ep):
        return comm.rank
        yield

    res = spmd(4, body)
    assert res.results == {r: ("ok", r) for r in range(4)}
    assert not _err_sends(res)
    assert not res.trace.of_kind("episode")
    closes = res.trace.of_kind("close")
    assert len(closes) >= 4


def test_clean_scope_exit_joins_pending_episode():
    def body(comm, ep):
        if comm.rank == 0:
            yield from comm.signal_error(6)
        # rank 1 finishes its work and leaves the scope without waiting
        for _ in range(5):
            yield from ep.pause()
        return "left"

    res = spmd(2, body, seed=2)
    assert set(res.results.values()) == {("propagated", "0:6")}


# -- collectives -----------------------------------------------------------------------------


def test_all_reduce_sum_and_band():
    def body(comm, ep):
        s = yield from comm.all_reduce(comm.rank).wait()
        b = yield from comm.all_reduce([1, 1, 0, 1][comm.rank], "band").wait()
        v = yield from comm.all_reduce([comm.rank, -comm.rank], "max").wait()
        yield from comm.barrier().wait()
        return s, b, tuple(v)

    res = spmd(4, body, seed=3)
    assert set(res.results.values()) == {("ok", (6, 0, (3, 0)))}


def test_error_mid_collective_leaks():
    def body(comm, ep):
        if comm.rank == 0:
            yield from comm.signal_error(11)
        yield from comm.all_reduce(1).wait()

    res = spmd(3, body, seed=4)
    assert set(res.results.values()) == {("propagated", "0:11")}
    assert sum(r["count"] for r in res.trace.of_kind("leak")) > 0


def test_fault_free_collectives_do_not_leak():
    def body(comm, ep):
        yield from comm.all_reduce(1).wait()
        yield from comm.barrier().wait()

    res = spmd(5, body)
    assert not res.trace.of_kind("leak")


# -- failed-rank resolution ------------------------------------------------------------------


def _resolve(n, failed, seed=0):
    def prog(ep):
        with Instance.acquire(ep) as inst:
            comm = inst.world.duplicate()
            return (yield from determine_failed(comm, ep.rank in failed, failed.get(ep.rank, 0)))

    return run([prog] * n, seed=seed)


@pytest.mark.parametrize(
    "n,failed",
    [(8, {0: 42, 3: 7}), (4, {3: 9}), (4, {0: 5}), (1, {0: 1}), (5, {r: r + 1 for r in range(5)})],
)
def test_determine_failed_examples(n, failed):
    res = _resolve(n, failed)
    want = ErrorReport.from_map(failed)
    assert set(res.results.values()) == {want}


def test_determine_failed_without_failures_is_a_violation():
    with pytest.raises(SimulationCrash) as info:
        _resolve(3, {})
    assert isinstance(info.value.__cause__, ProtocolViolation)


# -- buffer reuse ---------------------------------------------------------------------------


def test_success_implies_terminal_request():
    seen = []

    def body(comm, ep):
        peer = 1 - comm.rank
        f = comm.isend(peer, 0, b"x")
        g = comm.irecv(peer, 0)
        yield from f.wait()
        seen.append(f.request.state)
        yield from g.wait()
        seen.append(g.request.state)

    er = spmd(2, body, explore_all=True)
    assert er.complete
    assert seen and all(s is RequestState.COMPLETE for s in seen)
