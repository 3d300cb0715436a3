"""Binary frames exchanged between server and clients.

Frame layout (all header fields big-endian)::

    magic 'FLRP' | version u8 | type u8 | epoch u32 | sender u16 | payload_len u32 | payload

Parameter payloads are a u64 big-endian count followed by little-endian float32
values. Loss payloads are a single little-endian float64. Only parameters and
scalar losses ever travel; no message can carry raw flight data.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from typing import Union

import numpy as np

MAGIC = b"FLRP"
VERSION = 0x01
HEADER = struct.Struct(">4sBBIHI")
HEADER_SIZE = HEADER.size
COUNT = struct.Struct(">Q")
LOSS = struct.Struct("<d")
MAX_PAYLOAD = 1 << 30
SERVER_ID = 0xFFFF


class DecodeError(ValueError):
    def __init__(self, offset: int, reason: str):
        super().__init__(f"offset {offset}: {reason}")
        self.offset = offset
        self.reason = reason


class MessageType(enum.IntEnum):
    GLOBAL_MODEL = 1
    LOCAL_MODEL = 2
    EVAL_ASSIGNMENT = 3
    EVAL_LOSS = 4
    VAL_SUM_LOSS = 5
    EPOCH_END = 6
    SHUTDOWN = 7
    REGISTER = 8  # client hello; payload is the training window count as a scalar


PARAMETER_TYPES = frozenset({MessageType.GLOBAL_MODEL, MessageType.LOCAL_MODEL, MessageType.EVAL_ASSIGNMENT})
SCALAR_TYPES = frozenset({MessageType.EVAL_LOSS, MessageType.VAL_SUM_LOSS, MessageType.REGISTER})
EMPTY_TYPES = frozenset({MessageType.EPOCH_END, MessageType.SHUTDOWN})

Payload = Union[np.ndarray, float, None]


@dataclass(frozen=True, eq=False)
class Message:
    type: MessageType
    epoch: int
    sender: int
    payload: Payload = None

    def __post_init__(self) -> None:
        t = MessageType(self.type)
        object.__setattr__(self, "type", t)
        if t in PARAMETER_TYPES:
            arr = np.ascontiguousarray(self.payload, dtype=np.float32).ravel()
            object.__setattr__(self, "payload", arr)
        elif t in SCALAR_TYPES:
            object.__setattr__(self, "payload", float(self.payload))
        elif self.payload is not None:
            raise ValueError(f"{t.name} carries no payload")
        if not 0 <= self.epoch < 1 << 32 or not 0 <= self.sender < 1 << 16:
            raise ValueError("epoch must fit u32 and sender u16")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Message):
            return NotImplemented
        return encode_message(self) == encode_message(other)


def _payload_bytes(msg: Message) -> bytes:
    if msg.type in PARAMETER_TYPES:
        arr = msg.payload.astype("<f4", copy=False)
        return COUNT.pack(arr.size) + arr.tobytes()
    if msg.type in SCALAR_TYPES:
        return LOSS.pack(msg.payload)
    return b""


def encode_message(msg: Message) -> bytes:
    body = _payload_bytes(msg)
    return HEADER.pack(MAGIC, VERSION, int(msg.type), msg.epoch, msg.sender, len(body)) + body


def decode_header(data: bytes) -> tuple[MessageType, int, int, int]:
    """Validate a 16-byte header; returns (type, epoch, sender, payload_len)."""
    if len(data) < HEADER_SIZE:
        raise DecodeError(len(data), f"truncated header ({len(data)} of {HEADER_SIZE} bytes)")
    magic, version, tag, epoch, sender, length = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise DecodeError(0, f"bad magic {magic!r}")
    if version != VERSION:
        raise DecodeError(4, f"unsupported version {version}")
    try:
        mtype = MessageType(tag)
    except ValueError:
        raise DecodeError(5, f"unknown type tag {tag}") from None
    if length > MAX_PAYLOAD:
        raise DecodeError(12, f"payload length {length} exceeds limit {MAX_PAYLOAD}")
    return mtype, epoch, sender, length


def decode_payload(mtype: MessageType, body: bytes, base: int = HEADER_SIZE) -> Payload:
    if mtype in PARAMETER_TYPES:
        if len(body) < COUNT.size:
            raise DecodeError(base + len(body), "truncated parameter count")
        (count,) = COUNT.unpack_from(body)
        if COUNT.size + 4 * count != len(body):
            raise DecodeError(base, f"parameter count {count} does not match payload of {len(body)} bytes")
        return np.frombuffer(body, dtype="<f4", offset=COUNT.size).astype(np.float32)
    if mtype in SCALAR_TYPES:
        if len(body) != LOSS.size:
            raise DecodeError(base, f"loss payload must be 8 bytes, got {len(body)}")
        return LOSS.unpack(body)[0]
    if body:
        raise DecodeError(base, f"{mtype.name} must have an empty payload")
    return None


def decode_message(data: bytes) -> Message:
    data = bytes(data)
    mtype, epoch, sender, length = decode_header(data)
    end = HEADER_SIZE + length
    if len(data) < end:
        raise DecodeError(len(data), f"truncated payload ({len(data) - HEADER_SIZE} of {length} bytes)")
    if len(data) > end:
        raise DecodeError(end, f"{len(data) - end} trailing bytes after frame")
    return Message(mtype, epoch, sender, decode_payload(mtype, data[HEADER_SIZE:end]))
