from __future__ import annotations

import pytest
from hypothesis import given
from hypothesis import strategies as st

from faultprop.errors import MAX_CODE, ErrorReport, check_code
from faultprop.transport import FaultEvent, FaultParseError, FaultScript, MessagePattern, parse_faults
from faultprop.wire import (
    AGREE,
    REVOKE,
    SHRINK,
    ControlMessage,
    control_capacity,
    decode_code,
    decode_ints,
    decode_uints,
    encode_code,
    encode_ints,
    encode_uints,
    pack_control,
    unpack_control,
)

SCRIPT = """\
# kill then faults
0 1 kill
3 2 drop 0->2 tag=5
7 0 delay 1->0 tag=0 by=4
"""


def test_parse_fault_script():
    fs = parse_faults(SCRIPT)
    assert fs.events == (
        FaultEvent(0, 1, "kill"),
        FaultEvent(3, 2, "drop", MessagePattern(0, 2, 5)),
        FaultEvent(7, 0, "delay", MessagePattern(1, 0, 0), 4),
    )
    assert fs.killed_ranks == {1}
    assert parse_faults(fs.dumps()) == fs


def test_events_are_sorted_by_time():
    fs = parse_faults("5 0 kill\n1 1 kill\n")
    assert [e.time for e in fs.events] == [1, 5]
    with pytest.raises(ValueError):
        FaultScript((FaultEvent(5, 0, "kill"), FaultEvent(1, 1, "kill")))


@pytest.mark.parametrize(
    "line",
    [
        "0 1",
        "x 1 kill",
        "0 1 kill now",
        "0 1 explode",
        "0 1 drop 0-2 tag=1",
        "0 1 drop 0->2 tag=x",
        "0 1 delay 0->2 tag=1",
        "0 1 delay 0->2 tag=1 for=3",
        "-1 0 kill",
    ],
)
def test_bad_fault_lines(line):
    with pytest.raises(FaultParseError):
        parse_faults(line)


@given(st.integers(0, 2**64 - 1))
def test_code_roundtrip(code):
    payload = encode_code(code)
    assert len(payload) == 8
    assert decode_code(payload) == code


def test_code_is_big_endian():
    assert encode_code(1) == b"\x00" * 7 + b"\x01"


@given(st.lists(st.integers(0, 2**64 - 1), max_size=20))
def test_uints_roundtrip(values):
    assert decode_uints(encode_uints(values)) == values


@given(st.lists(st.integers(-(2**63), 2**63 - 1), max_size=20))
def test_ints_roundtrip(values):
    assert decode_ints(encode_ints(values)) == values


def test_uints_reject_ragged_payload():
    with pytest.raises(ValueError):
        decode_uints(b"\x00" * 7)


@given(
    kind=st.sampled_from([REVOKE, AGREE, SHRINK]),
    comm=st.integers(0, 2**64 - 1),
    seq=st.integers(0, 2**32 - 1),
    phase=st.integers(0, 255),
    value=st.integers(0, 2**64 - 1),
    ranks=st.lists(st.integers(0, 2**32 - 1), max_size=16),
)
def test_control_roundtrip(kind, comm, seq, phase, value, ranks):
    if kind == REVOKE:
        msg = ControlMessage(kind, comm, seq)
    elif kind == AGREE:
        msg = ControlMessage(kind, comm, seq, phase=phase, value=value)
    else:
        msg = ControlMessage(kind, comm, seq, ranks=tuple(ranks))
    payload = pack_control(msg)
    assert unpack_control(payload) == msg
    assert len(payload) <= control_capacity(max(len(ranks), 1))


def test_control_layout():
    assert pack_control(ControlMessage(REVOKE, 2, 3)) == b"\x01" + (2).to_bytes(8, "big") + (3).to_bytes(4, "big")


def test_unknown_control_kind():
    with pytest.raises(ValueError):
        pack_control(ControlMessage(9, 0, 0))


def test_error_report():
    rep = ErrorReport.from_map({3: 7, 0: 42})
    assert rep.entries == ((0, 42), (3, 7))
    assert str(rep) == "0:42,3:7"
    assert ErrorReport.parse("0:42,3:7") == rep
    assert rep.ranks == (0, 3)
    assert rep.as_dict() == {0: 42, 3: 7}


@pytest.mark.parametrize("entries", [(), ((1, 2), (0, 3)), ((1, 2), (1, 3)), ((0, 0),)])
def test_error_report_rejects(entries):
    with pytest.raises(ValueError):
        ErrorReport(entries)


def test_check_code_bounds():
    assert check_code(MAX_CODE) == MAX_CODE
    for bad in (0, -1, MAX_CODE + 1, 1.5, "3"):
        with pytest.raises(ValueError):
            check_code(bad)
