"""Random small transport programs for differential and property tests."""

from __future__ import annotations

import random

from faultprop.transport import ANY_SOURCE, FaultEvent, FaultScript, RequestState

OPS = ("send", "send", "recv", "recvany", "ssend")
FINISHERS = ("waitall", "waitany_cancel", "test", "groups")


def gen_programs(rng: random.Random, n: int, max_ops: int = 3) -> list[list[tuple]]:
    progs = []
    for r in range(n):
        ops = []
        for _ in range(rng.randint(1, max_ops)):
            kind = rng.choice(OPS)
            peer = rng.choice([p for p in range(n) if p != r])
            ops.append((kind, peer, rng.randint(0, 1)))
        ops.append(("finish", rng.choice(FINISHERS), 0))
        progs.append(ops)
    return progs


def gen_kill(rng: random.Random, n: int) -> FaultScript | None:
    if rng.random() < 0.5:
        return None
    return FaultScript.of([FaultEvent(rng.randint(0, 6), rng.randrange(n), "kill")])


def build(progs: list[list[tuple]], channel: int = 0):
    """Rank programs; each returns the final (state, payload) of its requests."""

    def make(r: int, ops: list[tuple]):
        def program(ep):
            reqs = []
            for kind, peer, tag in ops:
                if kind == "send":
                    reqs.append(ep.post_send(peer, channel, tag, bytes([r])))
                elif kind == "ssend":
                    reqs.append(ep.post_send(peer, channel, tag, bytes([r]), synchronous=True))
                elif kind == "recv":
                    reqs.append(ep.post_recv(peer, channel, tag, 4))
                elif kind == "recvany":
                    reqs.append(ep.post_recv(ANY_SOURCE, channel, tag, 4))
                elif peer == "waitall":
                    yield from ep.wait_all(reqs)
                elif peer == "groups" and len(reqs) > 1:
                    half = len(reqs) // 2
                    yield from ep.wait_groups([reqs[:half], reqs[half:]])
                    yield from ep.pause()
                elif peer == "waitany_cancel":
                    yield from ep.wait_any(reqs)
                    for q in reqs:
                        if q.kind.value == "recv":
                            ep.cancel(q)
                else:
                    yield from ep.pause()
            out = []
            for q in reqs:
                st = ep.test(q)
                payload = q.payload if st is RequestState.COMPLETE and q.kind.value == "recv" else None
                out.append((st.value, payload))
            return tuple(out)

        return program

    return [make(r, ops) for r, ops in enumerate(progs)]


def outcome(run) -> tuple:
    return tuple(sorted(run.results.items())), run.deadlocked
