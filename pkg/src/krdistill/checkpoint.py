"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"KRCKPT01"            magic
    u32  version           currently 1
    i64  seed
    i64  iteration
    u32  n, then n bytes   JSON config snapshot (sorted keys)
    u32  tensor count
    per tensor:
        u16 name length, name (utf-8)
        u8  ndim, ndim x u32 extents
        float64 values, row-major
    u32  CRC-32 of everything above
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"KRCKPT01"
VERSION = 1


@dataclass
class Checkpoint:
    tensors: dict
    config: dict = field(default_factory=dict)
    seed: int = 0
    iteration: int = 0
    version: int = VERSION


def encode(ckpt):
    parts = [MAGIC, struct.pack("<Iqq", VERSION, ckpt.seed, ckpt.iteration)]
    cfg = json.dumps(ckpt.config, sort_keys=True).encode()
    parts += [struct.pack("<I", len(cfg)), cfg, struct.pack("<I", len(ckpt.tensors))]
    for name, value in ckpt.tensors.items():
        arr = np.ascontiguousarray(value, dtype="<f8")
        raw_name = name.encode()
        parts += [struct.pack("<H", len(raw_name)), raw_name,
                  struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape), arr.tobytes()]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, raw):
        self.raw = raw
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.raw):
            raise FormatError(f"checkpoint truncated at byte {self.pos}")
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(raw):
    if raw[:len(MAGIC)] != MAGIC:
        raise FormatError(f"bad checkpoint magic {raw[:len(MAGIC)]!r}")
    if len(raw) < len(MAGIC) + 4:
        raise FormatError("checkpoint truncated")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    r = _Reader(body)
    r.take(len(MAGIC))
    version, seed, iteration = r.unpack("<Iqq")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    if zlib.crc32(body) != crc:
        raise FormatError("checkpoint checksum mismatch")
    (n,) = r.unpack("<I")
    try:
        config = json.loads(r.take(n).decode())
    except ValueError as exc:
        raise FormatError(f"bad checkpoint config: {exc}") from None
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        size = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(body):
        raise FormatError(f"{len(body) - r.pos} trailing bytes in checkpoint")
    return Checkpoint(tensors, config, seed, iteration, version)


def save_checkpoint(path, ckpt):
    Path(path).write_bytes(encode(ckpt))


def load_checkpoint(path):
    return decode(Path(path).read_bytes())


def network_tensors(net):
    return {p.name: p.data.copy() for p in net.parameters()}


def load_network_tensors(net, tensors):
    params = net.named_parameters()
    missing = sorted(set(params) - set(tensors))
    if missing:
        raise FormatError(f"checkpoint lacks parameters {missing[:3]}")
    for name, p in params.items():
        if tensors[name].shape != p.data.shape:
            raise FormatError(f"{name}: checkpoint shape {tensors[name].shape} != {p.data.shape}")
        p.tensor.data = tensors[name].copy()
    return net
