"""Binary checkpoint format.

Layout (little-endian)::

    8s   magic "MASKATN1"
    u32  format version
    u32  n, n bytes   run configuration text (UTF-8)
    u32  n, n bytes   phase tag
    u64  training step
    u64  optimizer step
    u32  tensor count
    per tensor: u32 n, n bytes name; u32 ndim; ndim x u64 dims; prod(dims) x f64
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"MASKATN1"
VERSION = 1


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedPayloadError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config_text: str
    phase: str
    step: int
    tensors: dict[str, np.ndarray]
    optim_step: int = 0
    version: int = VERSION

    def __eq__(self, other):
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return (self.config_text == other.config_text and self.phase == other.phase
                and self.step == other.step and self.optim_step == other.optim_step
                and list(self.tensors) == list(other.tensors)
                and all(self.tensors[k].shape == other.tensors[k].shape
                        and self.tensors[k].tobytes() == other.tensors[k].tobytes()
                        for k in self.tensors))


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def encode(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION), _pack_str(ckpt.config_text), _pack_str(ckpt.phase),
             struct.pack("<QQI", ckpt.step, ckpt.optim_step, len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        parts.append(_pack_str(name))
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedPayloadError(
                f"checkpoint truncated: needed {n} bytes at offset {self.pos}, file has {len(self.data)}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")


def decode(data: bytes) -> Checkpoint:
    if data[:len(MAGIC)] != MAGIC:
        raise BadMagicError(f"not a checkpoint: magic {data[:8]!r} != {MAGIC!r}")
    r = _Reader(data)
    r.take(len(MAGIC))
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint format version {version}, this build reads {VERSION}")
    config_text = r.string()
    phase = r.string()
    step, optim_step, count = r.unpack("<QQI")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.string()
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}Q")
        n = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        tensors[name] = np.frombuffer(r.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after checkpoint payload")
    return Checkpoint(config_text, phase, step, tensors, optim_step, version)


def write_checkpoint(path: str | os.PathLike, ckpt: Checkpoint) -> None:
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as f:
        f.write(encode(ckpt))
    os.replace(tmp, path)


def read_checkpoint(path: str | os.PathLike) -> Checkpoint:
    with open(path, "rb") as f:
        return decode(f.read())
