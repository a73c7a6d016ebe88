"""Binary message format for parameter and token exchange.

Layout (little-endian): a fixed 64-byte header (magic "FOAP", u16
version, u16 kind, u32 round, u32 sender id, u32 tensor-section count,
u32 kv-section count, u64 body length, zero padding), then
length-prefixed named-tensor sections and key/value token sections.
Scalars cross the wire as f32; in-process state stays f64, so this
format defines the byte accounting and the on-disk checkpoints, not
the training arithmetic.

Every size is computable in closed form, and `measured == closed form`
is asserted by the transmission command.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .autodiff import Tensor
from .errors import BadMagic, TruncatedFile, VersionUnsupported
from .model import KVTokens, ParameterStore

MAGIC = b"FOAP"
VERSION = 1
KIND_ROUND = 1
KIND_BROADCAST = 2
KIND_CHECKPOINT = 3
HEADER_BYTES = 64
SERVER_ID = 0xFFFFFFFF

_HEADER_STRUCT = struct.Struct("<4sHHIIIIQ")  # 32 bytes, zero-padded to 64
KV_SECTION_META_BYTES = 16  # u32 client_id, u32 round, u32 n_tokens, u32 dim


def tensor_section_bytes(name: str, shape: Sequence[int]) -> int:
    """u32 name length + name + u8 rank + u32 per dim + f32 per scalar."""
    scalars = int(np.prod(shape)) if len(shape) else 1
    return 4 + len(name.encode("ascii")) + 1 + 4 * len(shape) + 4 * scalars


def kv_section_bytes(n_tokens: int, dim: int) -> int:
    return KV_SECTION_META_BYTES + 4 * (2 * n_tokens * dim)


def message_bytes(named_shapes: Mapping[str, Sequence[int]],
                  kv_dims: Sequence[tuple[int, int]]) -> int:
    """Closed-form serialized size of a message, header included."""
    total = HEADER_BYTES
    total += sum(tensor_section_bytes(n, s) for n, s in named_shapes.items())
    total += sum(kv_section_bytes(n, d) for n, d in kv_dims)
    return total


@dataclass
class Message:
    kind: int
    round: int
    sender: int
    tensors: dict[str, np.ndarray]
    kv_sections: list[KVTokens]


def serialize_message(kind: int, round_index: int, sender: int,
                      tensors: Mapping[str, np.ndarray],
                      kv_sections: Sequence[KVTokens] = ()) -> bytes:
    """Encode tensors (in lexicographic name order) and token sections."""
    body = bytearray()
    names = sorted(tensors)
    for name in names:
        arr = np.asarray(tensors[name])
        encoded = name.encode("ascii")
        body += struct.pack("<I", len(encoded))
        body += encoded
        body += struct.pack("<B", arr.ndim)
        body += struct.pack(f"<{arr.ndim}I", *arr.shape)
        body += arr.astype("<f4").tobytes()
    for kv in kv_sections:
        n, d = kv.n_tokens, kv.dim
        body += struct.pack("<IIII", kv.client_id, kv.round, n, d)
        body += kv.keys.values.astype("<f4").tobytes()
        body += kv.values.values.astype("<f4").tobytes()
    header = _HEADER_STRUCT.pack(MAGIC, VERSION, kind, round_index, sender,
                                 len(names), len(kv_sections), len(body))
    return header + bytes(HEADER_BYTES - _HEADER_STRUCT.size) + bytes(body)


class _Cursor:
    def __init__(self, data: bytes, offset: int):
        self.data = data
        self.offset = offset

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            raise TruncatedFile(
                f"needed {n} bytes at offset {self.offset}, have {len(self.data)}")
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk


def parse_message(data: bytes) -> Message:
    if len(data) < HEADER_BYTES:
        raise TruncatedFile(f"message shorter than the {HEADER_BYTES}-byte header")
    magic, version, kind, round_index, sender, n_tensors, n_kv, body_len = \
        _HEADER_STRUCT.unpack_from(data)
    if magic != MAGIC:
        raise BadMagic(f"expected {MAGIC!r}, got {magic!r}")
    if version != VERSION:
        raise VersionUnsupported(f"version {version} not supported (expected {VERSION})")
    if len(data) != HEADER_BYTES + body_len:
        raise TruncatedFile(
            f"declared body of {body_len} bytes, found {len(data) - HEADER_BYTES}")

    cur = _Cursor(data, HEADER_BYTES)
    tensors: dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack("<I", cur.take(4))
        name = cur.take(name_len).decode("ascii")
        (rank,) = struct.unpack("<B", cur.take(1))
        shape = struct.unpack(f"<{rank}I", cur.take(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        raw = cur.take(4 * count)
        tensors[name] = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)
    kv_sections = []
    for _ in range(n_kv):
        client_id, kv_round, n, d = struct.unpack("<IIII", cur.take(16))
        keys = np.frombuffer(cur.take(4 * n * d), dtype="<f4").astype(np.float64)
        values = np.frombuffer(cur.take(4 * n * d), dtype="<f4").astype(np.float64)
        kv_sections.append(KVTokens(Tensor(keys.reshape(n, d)),
                                    Tensor(values.reshape(n, d)),
                                    client_id, kv_round))
    return Message(kind, round_index, sender, tensors, kv_sections)


def save_checkpoint(path, params: ParameterStore, round_index: int = 0) -> None:
    """Write every parameter to disk (f32 precision)."""
    arrays = {name: params[name] for name in params.names()}
    blob = serialize_message(KIND_CHECKPOINT, round_index, SERVER_ID, arrays)
    with open(path, "wb") as fh:
        fh.write(blob)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        message = parse_message(fh.read())
    if message.kind != KIND_CHECKPOINT:
        raise BadMagic(f"not a checkpoint file (kind {message.kind})")
    return message.tensors
