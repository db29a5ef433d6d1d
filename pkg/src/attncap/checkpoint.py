"""Binary checkpoint format.

Layout, all integers unsigned 32-bit little-endian::

    b"ATNC"  version
    config_len  config (UTF-8 JSON, sorted keys)
    epoch
    rng_len  rng state (UTF-8 JSON, sorted keys)
    tensor_count
    repeated: name_len name rank extents[rank] values (float64 little-endian)

Files are written to a temporary name and renamed into place, so a reader
never observes a partial checkpoint.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, UnsupportedVersionError

MAGIC = b"ATNC"
VERSION = 1
_U32 = struct.Struct("<I")


@dataclass
class Checkpoint:
    config: dict
    epoch: int
    rng_state: dict
    tensors: dict[str, np.ndarray]


def _json_bytes(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def dumps(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, _U32.pack(VERSION)]
    config = _json_bytes(ckpt.config)
    parts += [_U32.pack(len(config)), config, _U32.pack(ckpt.epoch)]
    rng = _json_bytes(ckpt.rng_state)
    parts += [_U32.pack(len(rng)), rng, _U32.pack(len(ckpt.tensors))]
    for name, values in ckpt.tensors.items():
        raw_name = name.encode("utf-8")
        values = np.asarray(values, dtype="<f8")
        parts += [_U32.pack(len(raw_name)), raw_name, _U32.pack(values.ndim)]
        parts += [_U32.pack(extent) for extent in values.shape]
        parts.append(np.ascontiguousarray(values).tobytes())
    return b"".join(parts)


def save(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(ckpt))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes, source):
        self.buf = buf
        self.pos = 0
        self.source = source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.source}: truncated checkpoint at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def json(self):
        raw = self.take(self.u32())
        try:
            return json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, ValueError):
            raise FormatError(f"{self.source}: corrupt JSON block") from None


def loads(buf: bytes, source="<bytes>") -> Checkpoint:
    r = _Reader(buf, source)
    if r.take(4) != MAGIC:
        raise FormatError(f"{source}: not a checkpoint (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise UnsupportedVersionError(f"{source}: checkpoint format version {version} is not supported (expected {VERSION})")
    config = r.json()
    epoch = r.u32()
    rng_state = r.json()
    tensors = {}
    for _ in range(r.u32()):
        try:
            name = r.take(r.u32()).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{source}: corrupt tensor name") from None
        shape = tuple(r.u32() for _ in range(r.u32()))
        count = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
    if r.pos != len(buf):
        raise FormatError(f"{source}: {len(buf) - r.pos} trailing bytes after last tensor")
    return Checkpoint(config, epoch, rng_state, tensors)


def load(path) -> Checkpoint:
    return loads(Path(path).read_bytes(), source=path)
