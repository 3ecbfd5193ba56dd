"""Bit-exact wire format for protocol messages.

Frame layout, little-endian, 18-byte header::

    magic     b"DQN1"    4 bytes
    version   u8         1
    type      u8         low nibble msg_type, high nibble vec_count
    stage     u32
    worker_id u32        0xFFFFFFFF for the master
    p         u32        length of each payload vector
    payload   vec_count * p float64
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"DQN1"
VERSION = 1
MASTER_ID = 0xFFFFFFFF
HEADER = struct.Struct("<4sBBIII")
HEADER_SIZE = HEADER.size  # 18


class MsgType(enum.IntEnum):
    BROADCAST_THETA = 0
    LOCAL_THETA = 1
    LOCAL_GRAD = 2
    GLOBAL_GRAD = 3
    HV_PRODUCT = 4
    V_VECTOR = 5  # (v_m, H_m g) pair uploaded by SR1 workers
    BROADCAST_THETA_AND_V = 6
    CONTROL = 7


VEC_COUNTS = {
    MsgType.BROADCAST_THETA: (1,),
    MsgType.LOCAL_THETA: (1,),
    MsgType.LOCAL_GRAD: (1,),
    MsgType.GLOBAL_GRAD: (1,),
    MsgType.HV_PRODUCT: (1,),
    MsgType.V_VECTOR: (2,),
    MsgType.BROADCAST_THETA_AND_V: (2,),
    MsgType.CONTROL: (0, 1),
}


class CodecError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Message:
    msg_type: MsgType
    stage: int
    worker_id: int
    payload: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "msg_type", MsgType(self.msg_type))
        vecs = tuple(np.ascontiguousarray(v, dtype=np.float64).reshape(-1) for v in self.payload)
        for v in vecs:
            v.setflags(write=False)
        object.__setattr__(self, "payload", vecs)
        if len(vecs) not in VEC_COUNTS[self.msg_type]:
            raise CodecError(f"{self.msg_type.name} carries {VEC_COUNTS[self.msg_type]} vectors, got {len(vecs)}")
        if len({v.shape[0] for v in vecs}) > 1:
            raise CodecError("payload vectors must share one length")
        if not (0 <= self.stage <= 0xFFFFFFFF and 0 <= self.worker_id <= 0xFFFFFFFF):
            raise CodecError("stage and worker_id must fit in u32")

    @property
    def p(self) -> int:
        return self.payload[0].shape[0] if self.payload else 0

    @property
    def payload_floats(self) -> int:
        return sum(v.shape[0] for v in self.payload)

    def __eq__(self, other):
        if not isinstance(other, Message):
            return NotImplemented
        return (
            self.msg_type == other.msg_type
            and self.stage == other.stage
            and self.worker_id == other.worker_id
            and len(self.payload) == len(other.payload)
            and all(a.tobytes() == b.tobytes() for a, b in zip(self.payload, other.payload))
        )

    __hash__ = None


def encode_message(m: Message) -> bytes:
    type_byte = int(m.msg_type) | (len(m.payload) << 4)
    head = HEADER.pack(MAGIC, VERSION, type_byte, m.stage, m.worker_id, m.p)
    return head + b"".join(v.astype("<f8", copy=False).tobytes() for v in m.payload)


def frame_length(vec_count: int, p: int) -> int:
    return HEADER_SIZE + 8 * vec_count * p


def decode_message(buf: bytes) -> Message:
    if len(buf) < HEADER_SIZE:
        raise CodecError(f"truncated header: {len(buf)} bytes")
    magic, version, type_byte, stage, worker_id, p = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise CodecError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CodecError(f"unsupported version {version}")
    code, vec_count = type_byte & 0x0F, type_byte >> 4
    try:
        msg_type = MsgType(code)
    except ValueError:
        raise CodecError(f"unknown msg_type {code}") from None
    if vec_count not in VEC_COUNTS[msg_type]:
        raise CodecError(f"vec_count {vec_count} inconsistent with {msg_type.name}")
    if vec_count == 0 and p != 0:
        raise CodecError("empty payload must declare p = 0")
    expected = frame_length(vec_count, p)
    if len(buf) != expected:
        raise CodecError(f"frame is {len(buf)} bytes, header implies {expected}")
    flat = np.frombuffer(buf, dtype="<f8", offset=HEADER_SIZE).astype(np.float64)
    payload = tuple(flat[i * p:(i + 1) * p] for i in range(vec_count))
    return Message(msg_type, stage, worker_id, payload)
