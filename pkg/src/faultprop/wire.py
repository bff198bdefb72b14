"""Bit-exact payload encodings for protocol traffic.

Error channel
    tag 0, payload = 8-byte big-endian unsigned error code.
Corruption vote
    1-byte 0/1.
Failed-rank arrays, scan and broadcast values
    sequences of 8-byte big-endian unsigned integers.
Control channel (ULFM emulation), first byte is the message kind:
    revoke  ``01 | comm:u64 | seq:u32``
    agree   ``02 | comm:u64 | seq:u32 | phase:u8 | value:u64``
    shrink  ``03 | comm:u64 | seq:u32 | count:u32 | rank:u32 * count``
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

ERR_TAG = 0
CODE_SIZE = 8

REVOKE = 1
AGREE = 2
SHRINK = 3

_HEAD = struct.Struct(">BQI")


def encode_code(code: int) -> bytes:
    return struct.pack(">Q", code)


def decode_code(payload: bytes) -> int:
    return struct.unpack(">Q", payload)[0]


def encode_uints(values, width: int = 8) -> bytes:
    return b"".join(v.to_bytes(width, "big", signed=False) for v in values)


def decode_uints(payload: bytes, width: int = 8) -> list[int]:
    if len(payload) % width:
        raise ValueError(f"payload of {len(payload)} bytes is not a multiple of {width}")
    return [int.from_bytes(payload[i : i + width], "big", signed=False) for i in range(0, len(payload), width)]


def encode_ints(values, width: int = 8) -> bytes:
    return b"".join(v.to_bytes(width, "big", signed=True) for v in values)


def decode_ints(payload: bytes, width: int = 8) -> list[int]:
    return [int.from_bytes(payload[i : i + width], "big", signed=True) for i in range(0, len(payload), width)]


@dataclass(frozen=True)
class ControlMessage:
    kind: int
    comm: int
    seq: int
    phase: int = 0
    value: int = 0
    ranks: tuple[int, ...] = ()


def pack_control(msg: ControlMessage) -> bytes:
    head = _HEAD.pack(msg.kind, msg.comm, msg.seq)
    if msg.kind == REVOKE:
        return head
    if msg.kind == AGREE:
        return head + struct.pack(">BQ", msg.phase, msg.value)
    if msg.kind == SHRINK:
        return head + struct.pack(f">I{len(msg.ranks)}I", len(msg.ranks), *msg.ranks)
    raise ValueError(f"unknown control kind {msg.kind}")


def unpack_control(payload: bytes) -> ControlMessage:
    kind, comm, seq = _HEAD.unpack_from(payload)
    rest = payload[_HEAD.size :]
    if kind == REVOKE:
        return ControlMessage(kind, comm, seq)
    if kind == AGREE:
        phase, value = struct.unpack(">BQ", rest)
        return ControlMessage(kind, comm, seq, phase=phase, value=value)
    if kind == SHRINK:
        (count,) = struct.unpack_from(">I", rest)
        ranks = struct.unpack_from(f">{count}I", rest, 4)
        return ControlMessage(kind, comm, seq, ranks=tuple(ranks))
    raise ValueError(f"unknown control kind {kind}")


def control_capacity(group_size: int) -> int:
    return _HEAD.size + 4 + 4 * group_size + 9
