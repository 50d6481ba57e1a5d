"""Binary framing for the federation protocol.

Frame: ``u32 LE payload length | u8 tag | payload``.  All integers and floats
little-endian.  See ``docs/protocol.md`` for the byte-level layout.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from ..escore import LossReport

HEADER = struct.Struct("<IB")
HEADER_SIZE = HEADER.size

TAG_HELLO = 0
TAG_ROUND_START = 1
TAG_LOSS_REPORT = 2
TAG_SHUTDOWN = 3

# Room for a RoundStart of the 784-1024-1024-10 network (4 * 1,863,690 + 8 bytes).
MAX_PAYLOAD = 1 << 28

_HELLO = struct.Struct("<IQ")
_REPORT_HEAD = struct.Struct("<QII")
_ENTRY = np.dtype([("batch", "<u4"), ("loss", "<f4")])
_U64 = struct.Struct("<Q")

REPORT_HEAD_SIZE = _REPORT_HEAD.size
ENTRY_SIZE = _ENTRY.itemsize


class DecodeError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at byte offset {offset}")
        self.offset = offset


@dataclass(frozen=True)
class Hello:
    client: int
    n_k: int


@dataclass
class RoundStart:
    t: int
    params: np.ndarray

    def __eq__(self, other):
        return (isinstance(other, RoundStart) and self.t == other.t
                and self.params.dtype == other.params.dtype
                and np.array_equal(self.params.view(np.uint32), other.params.view(np.uint32)))


@dataclass(frozen=True)
class LossReportMsg:
    report: LossReport


@dataclass(frozen=True)
class Shutdown:
    final_t: int


Message = Union[Hello, RoundStart, LossReportMsg, Shutdown]


def report_payload_size(entries: int) -> int:
    return REPORT_HEAD_SIZE + ENTRY_SIZE * entries


def _payload(msg: Message) -> tuple[int, bytes]:
    if isinstance(msg, Hello):
        return TAG_HELLO, _HELLO.pack(msg.client, msg.n_k)
    if isinstance(msg, RoundStart):
        params = np.ascontiguousarray(msg.params, dtype="<f4")
        return TAG_ROUND_START, _U64.pack(msg.t) + params.tobytes()
    if isinstance(msg, LossReportMsg):
        r = msg.report
        entries = np.array(r.entries, dtype=_ENTRY) if r.entries else np.empty(0, _ENTRY)
        return TAG_LOSS_REPORT, _REPORT_HEAD.pack(r.round, r.client, len(entries)) + entries.tobytes()
    if isinstance(msg, Shutdown):
        return TAG_SHUTDOWN, _U64.pack(msg.final_t)
    raise TypeError(f"not a protocol message: {msg!r}")


def encode(msg: Message) -> bytes:
    tag, payload = _payload(msg)
    if len(payload) > MAX_PAYLOAD:
        raise ValueError(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")
    return HEADER.pack(len(payload), tag) + payload


def parse_header(head: bytes) -> tuple[int, int]:
    """Validate a 5-byte frame header; returns ``(payload length, tag)``."""
    if len(head) < HEADER_SIZE:
        raise DecodeError("truncated frame header", len(head))
    length, tag = HEADER.unpack_from(head, 0)
    if length > MAX_PAYLOAD:
        raise DecodeError(f"payload length {length} exceeds limit {MAX_PAYLOAD}", 0)
    if tag > TAG_SHUTDOWN:
        raise DecodeError(f"unknown tag {tag}", 4)
    return length, tag


def decode(frame: bytes) -> Message:
    """Decode exactly one complete frame."""
    frame = bytes(frame)
    length, tag = parse_header(frame)
    end = HEADER_SIZE + length
    if len(frame) < end:
        raise DecodeError(f"truncated payload: header says {length} bytes", len(frame))
    if len(frame) > end:
        raise DecodeError("trailing bytes after frame", end)
    return decode_payload(tag, frame[HEADER_SIZE:])


def decode_payload(tag: int, payload: bytes) -> Message:
    base = HEADER_SIZE
    if tag == TAG_HELLO:
        _expect(len(payload) == _HELLO.size, f"hello payload must be {_HELLO.size} bytes", base)
        return Hello(*_HELLO.unpack(payload))
    if tag == TAG_SHUTDOWN:
        _expect(len(payload) == _U64.size, "shutdown payload must be 8 bytes", base)
        return Shutdown(*_U64.unpack(payload))
    if tag == TAG_ROUND_START:
        _expect(len(payload) >= 8, "round-start payload shorter than its round field", base)
        _expect((len(payload) - 8) % 4 == 0, "round-start params not a whole number of f32", base + 8)
        (t,) = _U64.unpack_from(payload, 0)
        params = np.frombuffer(payload, dtype="<f4", offset=8).astype(np.float32)
        return RoundStart(t, params)
    if tag == TAG_LOSS_REPORT:
        _expect(len(payload) >= REPORT_HEAD_SIZE, "loss-report payload shorter than its header", base)
        rnd, client, count = _REPORT_HEAD.unpack_from(payload, 0)
        want = report_payload_size(count)
        _expect(len(payload) == want,
                f"loss-report declares {count} entries ({want} bytes) but carries {len(payload)}",
                base + REPORT_HEAD_SIZE)
        rows = np.frombuffer(payload, dtype=_ENTRY, offset=REPORT_HEAD_SIZE)
        entries = [(int(b), float(l)) for b, l in zip(rows["batch"], rows["loss"])]
        return LossReportMsg(LossReport(rnd, client, entries))
    raise DecodeError(f"unknown tag {tag}", 4)


def decode_uplink(frame: bytes, max_entries: Optional[int] = None) -> Message:
    """Server-side decode: clients may only send Hello and LossReport.

    ``max_entries`` bounds a report by the sender's batch count, so a frame
    smuggling a parameter-sized vector is rejected even under a valid tag.
    """
    length, tag = parse_header(frame)
    if tag not in (TAG_HELLO, TAG_LOSS_REPORT):
        raise DecodeError(f"tag {tag} is not allowed on the uplink", 4)
    if tag == TAG_LOSS_REPORT and max_entries is not None:
        limit = report_payload_size(max_entries)
        if length > limit:
            raise DecodeError(f"uplink payload of {length} bytes exceeds report bound {limit}", 0)
    return decode(frame)


def _expect(cond: bool, message: str, offset: int) -> None:
    if not cond:
        raise DecodeError(message, offset)
