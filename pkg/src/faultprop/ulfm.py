"""Emulated run-through-stabilisation primitives on a transport with
liveness detection.

Each instance owns one control channel spanning the world with a
persistent any-source receive. Control traffic is drained by ``pump``,
which runs whenever a waiting rank wakes up:

* ``revoke`` marks a communicator revoked and floods a notice to its
  members; every rank re-floods the first notice it sees for a
  communicator.
* ``agree`` is a bitwise AND over the live members, computed by two
  all-to-all rounds. The second round re-exchanges first-round results so
  ranks that saw a member die mid-round still converge.
* ``shrink`` unions the known-dead sets in two rounds and derives a dense
  communicator over the survivors, numbered in their old order.
"""

from __future__ import annotations

from typing import TYPE_CHECKING

from . import protocol
from .errors import CorruptedCommError, PropagatedError, ProtocolViolation, TransportError, UsageError
from .transport import ANY_SOURCE, Endpoint, RequestState
from .wire import AGREE, REVOKE, SHRINK, ControlMessage, control_capacity, pack_control, unpack_control

if TYPE_CHECKING:
    from .protocol import Communicator

CTRL_TAG = 0
# resolution collectives on a shrunk communicator's data channel sit far
# below the tags used by user collectives
RESOLUTION_TAG_BASE = -(1 << 30)

_CORRUPTING = ("corrupt", "hard-fault")


class UlfmRuntime:
    def __init__(self, ep: Endpoint):
        self.ep = ep
        self.channel = ep.alloc_channel(range(ep.size), role="ctrl")
        self.capacity = control_capacity(ep.size)
        self.comms: dict[int, Communicator] = {}
        self.revoked: set[int] = set()
        self.mailbox: dict[tuple[int, int, int, int], dict[int, ControlMessage]] = {}
        self.closed = False
        self.ctrl_recv = self._post()

    def _post(self):
        return self.ep.post_recv(ANY_SOURCE, self.channel, CTRL_TAG, self.capacity)

    def _send(self, dest: int, msg: ControlMessage) -> None:
        self.ep.post_send(dest, self.channel, CTRL_TAG, pack_control(msg))

    def register(self, comm: "Communicator") -> None:
        self.comms[comm.id] = comm
        if comm.id in self.revoked:
            comm.state = protocol.CommState.REVOKED

    def pump(self) -> None:
        """Drain every completed control receive and repost it."""
        if self.closed:
            return
        while True:
            state = self.ep.test(self.ctrl_recv)
            if state is RequestState.PENDING:
                return
            done = self.ctrl_recv
            self.ctrl_recv = self._post()
            # an any-source receive errors when some member dies; that is
            # only a wake-up here, the dead set is read where it matters
            if state is RequestState.COMPLETE:
                self._dispatch(done.source, unpack_control(done.payload))

    def _dispatch(self, src: int, msg: ControlMessage) -> None:
        if msg.kind == REVOKE:
            self._mark_revoked(msg.comm, src)
        else:
            key = (msg.kind, msg.comm, msg.seq, msg.phase)
            self.mailbox.setdefault(key, {})[src] = msg

    def _mark_revoked(self, cid: int, by: int) -> None:
        if cid in self.revoked:
            return
        self.revoked.add(cid)
        self.ep.record("revoke", comm=cid, by=by)
        comm = self.comms.get(cid)
        members = comm.group if comm is not None else range(self.ep.size)
        for peer in members:
            if peer != self.ep.rank:
                self._send(peer, ControlMessage(REVOKE, cid, 0))
        if comm is not None and comm.state in (protocol.CommState.HEALTHY, protocol.CommState.ERRORING):
            comm.state = protocol.CommState.REVOKED

    def revoke(self, comm: "Communicator") -> None:
        self._mark_revoked(comm.id, self.ep.rank)
        if comm.state is not protocol.CommState.CLOSED:
            comm.state = protocol.CommState.REVOKED

    def close(self) -> None:
        if self.closed:
            return
        if self.ep.test(self.ctrl_recv) is RequestState.PENDING:
            self.ep.cancel(self.ctrl_recv)
        self.closed = True

    def exchange(self, comm: "Communicator", kind: int, seq: int, phase: int, msg: ControlMessage):
        """Send ``msg`` to every other member and collect the matching
        message of every member still alive."""
        ep = self.ep
        me = ep.rank
        for peer in comm.group:
            if peer != me:
                self._send(peer, msg)
        key = (kind, comm.id, seq, phase)
        while True:
            self.pump()
            box = self.mailbox.get(key, {})
            dead = ep.failed_ranks()
            if all(p == me or p in box or p in dead for p in comm.group):
                break
            yield from ep.wait_groups([[self.ctrl_recv]])
        return self.mailbox.pop(key, {})


def _runtime(comm: "Communicator") -> UlfmRuntime:
    rt = comm.instance.ulfm
    if rt is None or rt.closed:
        raise UsageError("no live ulfm runtime on this rank")
    return rt


def agree(comm: "Communicator", value: int):
    """Bitwise AND of ``value`` over the live members of ``comm``."""
    rt = _runtime(comm)
    comm.agree_seq += 1
    seq = comm.agree_seq
    acc = value
    for phase in (1, 2):
        msg = ControlMessage(AGREE, comm.id, seq, phase=phase, value=acc)
        box = yield from rt.exchange(comm, AGREE, seq, phase, msg)
        for m in box.values():
            acc &= m.value
    comm.ep.record("agree", comm=comm.id, value=acc)
    return acc


def shrink(comm: "Communicator"):
    """Derive a communicator over the members not known to be dead.

    Every survivor must call it; the new ranks are dense and keep the old
    relative order.
    """
    rt = _runtime(comm)
    comm.shrink_seq += 1
    dead = set(comm.ep.failed_ranks()) & set(comm.group)
    for phase in (1, 2):
        # the wire format has no phase field for shrink, so the round is
        # folded into the sequence number
        seq = 2 * comm.shrink_seq + phase - 1
        msg = ControlMessage(SHRINK, comm.id, seq, ranks=tuple(sorted(dead)))
        box = yield from rt.exchange(comm, SHRINK, seq, 0, msg)
        for m in box.values():
            dead.update(m.ranks)
    survivors = [r for r in comm.group if r not in dead]
    new = comm.derive(survivors)
    comm.ep.record("shrink", comm=comm.id, new=new.id, group=survivors)
    return new


def on_revoked(comm: "Communicator", reason: str, code: int = 0):
    """Resolve a revoked communicator; always raises.

    ``reason`` is ``signalled`` for the rank that signalled ``code``,
    ``none`` for ranks that only observed the revocation, and ``corrupt``
    or ``hard-fault`` for ranks that vote the communicator corrupted.
    """
    if comm.state is protocol.CommState.CLOSED and comm.outcome is not None:
        raise comm.outcome
    comm.state = protocol.CommState.REVOKED
    comm.ep.record("episode", comm=comm.id, reason=reason)
    vote = yield from agree(comm, 0 if reason in _CORRUPTING else 1)
    comm._abandon_outstanding(count_leaks=False)
    comm.state = protocol.CommState.CLOSED
    if vote == 0:
        comm.outcome = CorruptedCommError()
        raise comm.outcome
    new = yield from shrink(comm)
    comm.replacement = new
    tags = protocol._TagBlocks(new, new.channel)
    tags.base = RESOLUTION_TAG_BASE
    try:
        report = yield from protocol._determine_failed(tags, reason == "signalled", code, comm.rank)
    except ProtocolViolation:
        # a bare revoke: every survivor agreed and nobody signalled
        comm.outcome = TransportError("revoked")
        raise comm.outcome from None
    comm.outcome = PropagatedError(report)
    raise comm.outcome
