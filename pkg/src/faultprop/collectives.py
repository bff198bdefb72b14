"""Collective operations built from point-to-point rounds.

Each algorithm is a coroutine: it posts one round of requests, yields the
list of them and expects to be resumed once all of them are terminal.
``run_blocking`` drives one to completion; ``CollectiveFuture`` in
``protocol`` drives one incrementally while racing the error channel.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, Generator, Sequence

from .transport import Endpoint, Request, RequestState
from .wire import decode_ints, decode_uints, encode_ints, encode_uints

ROUNDS_PER_CALL = 64

Coroutine = Generator[list[Request], None, Any]

OPS: dict[str, Callable[[int, int], int]] = {
    "sum": lambda a, b: a + b,
    "max": max,
    "band": lambda a, b: a & b,
}


class CollectiveFailed(Exception):
    def __init__(self, req: Request):
        super().__init__(f"collective request {req.id} ended {req.state.value} ({req.error})")
        self.req = req


@dataclass
class CollectiveContext:
    """Addressing for one collective call: group, channel and tag block."""

    ep: Endpoint
    group: Sequence[int]
    rank: int
    channel: int
    tag_base: int
    collective: bool = True

    @property
    def size(self) -> int:
        return len(self.group)

    def send(self, peer: int, rnd: int, payload: bytes) -> Request:
        return self.ep.post_send(
            self.group[peer], self.channel, self.tag_base + rnd, payload, collective=self.collective
        )

    def recv(self, peer: int, rnd: int, capacity: int) -> Request:
        return self.ep.post_recv(
            self.group[peer], self.channel, self.tag_base + rnd, capacity, collective=self.collective
        )


def _checked(reqs: list[Request]) -> None:
    for r in reqs:
        if r.state is not RequestState.COMPLETE:
            raise CollectiveFailed(r)


class _Codec:
    def __init__(self, width: int, signed: bool):
        self.width, self.signed = width, signed

    def enc(self, values: Sequence[int]) -> bytes:
        return (encode_ints if self.signed else encode_uints)(values, self.width)

    def dec(self, payload: bytes) -> list[int]:
        return (decode_ints if self.signed else decode_uints)(payload, self.width)


def allreduce(
    ctx: CollectiveContext, values: Sequence[int], op: str, width: int = 8, signed: bool = True
) -> Coroutine:
    """Recursive doubling; non-power-of-two groups fold the excess ranks in
    before the doubling rounds and get the result back afterwards."""
    fn = OPS[op]
    codec = _Codec(width, signed)
    values = list(values)
    cap = width * len(values)
    n, me = ctx.size, ctx.rank
    pof2 = 1 << (n.bit_length() - 1)
    rem = n - pof2

    def combine(other: bytes) -> None:
        values[:] = [fn(a, b) for a, b in zip(values, codec.dec(other))]

    if me < 2 * rem:
        if me % 2 == 0:
            s = ctx.send(me + 1, 0, codec.enc(values))
            yield [s]
            _checked([s])
            newrank = -1
        else:
            r = ctx.recv(me - 1, 0, cap)
            yield [r]
            _checked([r])
            combine(r.payload)
            newrank = me // 2
    else:
        newrank = me - rem

    if newrank != -1:
        mask, rnd = 1, 1
        while mask < pof2:
            partner = newrank ^ mask
            peer = partner * 2 + 1 if partner < rem else partner + rem
            s = ctx.send(peer, rnd, codec.enc(values))
            r = ctx.recv(peer, rnd, cap)
            yield [s, r]
            _checked([s, r])
            combine(r.payload)
            mask <<= 1
            rnd += 1

    last = ROUNDS_PER_CALL - 1
    if me < 2 * rem:
        if me % 2:
            s = ctx.send(me - 1, last, codec.enc(values))
            yield [s]
            _checked([s])
        else:
            r = ctx.recv(me + 1, last, cap)
            yield [r]
            _checked([r])
            values = codec.dec(r.payload)
    return values


def scan_sum(ctx: CollectiveContext, value: int) -> Coroutine:
    """Inclusive prefix sum by recursive doubling (Hillis-Steele)."""
    acc = value
    n, me = ctx.size, ctx.rank
    dist, rnd = 1, 0
    while dist < n:
        reqs, r = [], None
        if me + dist < n:
            reqs.append(ctx.send(me + dist, rnd, encode_uints([acc])))
        if me - dist >= 0:
            r = ctx.recv(me - dist, rnd, 8)
            reqs.append(r)
        if reqs:
            yield reqs
            _checked(reqs)
        if r is not None:
            acc += decode_uints(r.payload)[0]
        dist <<= 1
        rnd += 1
    return acc


def bcast(ctx: CollectiveContext, value: int, root: int) -> Coroutine:
    """Binomial-tree broadcast of one unsigned integer from ``root``."""
    n, me = ctx.size, ctx.rank
    rel = (me - root) % n
    mask = 1
    while mask < n:
        if rel & mask:
            r = ctx.recv((me - mask) % n, 0, 8)
            yield [r]
            _checked([r])
            value = decode_uints(r.payload)[0]
            break
        mask <<= 1
    mask >>= 1
    sends = []
    while mask > 0:
        if rel + mask < n:
            sends.append(ctx.send((me + mask) % n, 0, encode_uints([value])))
        mask >>= 1
    if sends:
        yield sends
        _checked(sends)
    return value


def barrier(ctx: CollectiveContext) -> Coroutine:
    """Dissemination barrier: round k talks to the ranks 2**k away."""
    n, me = ctx.size, ctx.rank
    dist, rnd = 1, 0
    while dist < n:
        s = ctx.send((me + dist) % n, rnd, b"")
        r = ctx.recv((me - dist) % n, rnd, 0)
        yield [s, r]
        _checked([s, r])
        dist <<= 1
        rnd += 1
    return None


def run_blocking(ep: Endpoint, coro: Coroutine) -> Generator[Any, Any, Any]:
    """Drive a collective coroutine, blocking on each round."""
    try:
        reqs = next(coro)
        while True:
            yield from ep.wait_all(reqs)
            reqs = coro.send(None)
    except StopIteration as stop:
        return stop.value
