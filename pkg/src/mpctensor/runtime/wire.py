"""Binary frame format shared by every transport.

Layout (all little-endian)::

    u32  length of everything that follows
    u64  session id
    u64  plan id
    u32  node id
    u8   tag          (distinguishes several tensors sent for one node)
    u16  sender       (party index in the session)
    u16  receiver
    u8   phase        (0 offline, 1 online)
    u8   backend      (0 int64, 1 crt)
    u8   dtype        (0 = u64 words)
    u8   rank
    u32  dims[rank]
    u64  payload words (crt: the k residues of one element are adjacent)
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass

from ..errors import ProtocolDesync
from ..ring import Backend, CrtParams, DEFAULT_CRT, RingTensor

LENGTH = struct.Struct("<I")
HEADER = struct.Struct("<QQIBHHBBBB")
DTYPE_U64 = 0
WORD_SIZE = 8

_BACKEND_CODE = {Backend.INT64: 0, Backend.CRT: 1}
_CODE_BACKEND = {v: k for k, v in _BACKEND_CODE.items()}


@dataclass(frozen=True)
class Frame:
    session_id: int
    plan_id: int
    node_id: int
    tag: int
    sender: int
    receiver: int
    phase: int
    tensor: RingTensor


def header_size(rank: int) -> int:
    return HEADER.size + 4 * rank


def payload_size(shape, backend: Backend, crt: CrtParams = DEFAULT_CRT) -> int:
    words = 1 if backend is Backend.INT64 else crt.k
    return math.prod(shape) * words * WORD_SIZE


def frame_size(shape, backend: Backend, crt: CrtParams = DEFAULT_CRT) -> int:
    """Bytes on the wire for one frame, length prefix included."""
    return LENGTH.size + header_size(len(shape)) + payload_size(shape, backend, crt)


def encode_frame(frame: Frame) -> bytes:
    t = frame.tensor
    head = HEADER.pack(frame.session_id, frame.plan_id, frame.node_id, frame.tag, frame.sender,
                       frame.receiver, frame.phase, _BACKEND_CODE[t.backend], DTYPE_U64, t.ndim)
    dims = struct.pack(f"<{t.ndim}I", *t.shape)
    body = head + dims + t.to_bytes()
    return LENGTH.pack(len(body)) + body


def decode_body(body: bytes | memoryview, crt: CrtParams = DEFAULT_CRT) -> Frame:
    if len(body) < HEADER.size:
        raise ProtocolDesync("frame shorter than its header")
    sid, pid, nid, tag, snd, rcv, phase, bcode, dtype, rank = HEADER.unpack_from(body)
    if dtype != DTYPE_U64 or bcode not in _CODE_BACKEND:
        raise ProtocolDesync(f"unknown backend/dtype tags {bcode}/{dtype}")
    shape = struct.unpack_from(f"<{rank}I", body, HEADER.size)
    backend = _CODE_BACKEND[bcode]
    start = header_size(rank)
    if len(body) - start != payload_size(shape, backend, crt):
        raise ProtocolDesync("payload length does not match header dims")
    tensor = RingTensor.from_bytes(memoryview(body)[start:], backend, shape, crt)
    return Frame(sid, pid, nid, tag, snd, rcv, phase, tensor)


def decode_frame(buf: bytes, crt: CrtParams = DEFAULT_CRT) -> Frame:
    (n,) = LENGTH.unpack_from(buf)
    if len(buf) != LENGTH.size + n:
        raise ProtocolDesync("length prefix does not match frame")
    return decode_body(memoryview(buf)[LENGTH.size:], crt)
