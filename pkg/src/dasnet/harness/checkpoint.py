"""Binary checkpoints: named float32 tensors plus JSON training metadata.

Layout (all integers little-endian)::

    8s   magic  b"DASNCKPT"
    u32  format version
    u32  metadata length, then that many bytes of UTF-8 JSON
    u32  tensor count
    per tensor, in sorted name order:
        u16 name length, name bytes (UTF-8)
        u8  ndim, then ndim × u32 dims
        prod(dims) × f32 payload
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"DASNCKPT"
VERSION = 1


class CheckpointError(ValueError):
    def __init__(self, path, offset: int, message: str):
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{path}: byte {offset}: {message}")


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    meta = json.dumps(ckpt.meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta)), meta, struct.pack("<I", len(ckpt.tensors))]
    for name in sorted(ckpt.tensors):
        arr = np.ascontiguousarray(ckpt.tensors[name], dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    data = encode_checkpoint(ckpt)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(self.path, self.pos, f"truncated while reading {what} "
                                                       f"(need {n} bytes, {len(self.data) - self.pos} left)")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_checkpoint(data: bytes, path="<bytes>") -> Checkpoint:
    r = _Reader(data, path)
    magic = r.take(len(MAGIC), "magic")
    if magic != MAGIC:
        bad = next(i for i, (a, b) in enumerate(zip(magic, MAGIC)) if a != b)
        raise CheckpointError(path, bad, f"bad magic {magic!r}")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointError(path, r.pos - 4, f"unsupported checkpoint version {version} (expected {VERSION})")
    (meta_len,) = r.unpack("<I", "metadata length")
    meta_at = r.pos
    try:
        meta = json.loads(r.take(meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(path, meta_at, f"corrupt metadata: {exc}") from None
    (count,) = r.unpack("<I", "tensor count")
    tensors: dict[str, np.ndarray] = {}
    prev = None
    for _ in range(count):
        at = r.pos
        (name_len,) = r.unpack("<H", "name length")
        try:
            name = r.take(name_len, "tensor name").decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(path, at, "tensor name is not UTF-8") from None
        if prev is not None and name <= prev:
            raise CheckpointError(path, at, f"tensor {name!r} out of sorted order")
        prev = name
        (ndim,) = r.unpack("<B", "ndim")
        shape = r.unpack(f"<{ndim}I", "shape")
        n = int(np.prod(shape, dtype=np.int64))
        payload = r.take(4 * n, f"payload of {name!r}")
        tensors[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape)
    if r.pos != len(data):
        raise CheckpointError(path, r.pos, f"{len(data) - r.pos} trailing bytes")
    return Checkpoint(tensors, meta)


def load_checkpoint(path) -> Checkpoint:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"checkpoint {p} not found")
    return decode_checkpoint(p.read_bytes(), p)
