"""CMCK checkpoint files.

Layout (all integers little-endian u32)::

    b"CMCK" | version | meta_len | meta (UTF-8 JSON, sorted keys)
    | record_count | record*

    record = name_len | name (UTF-8) | ndim | dim* | float64 LE payload

Record names are namespaced: ``param/<dotted>``, ``adam_m/<dotted>``,
``adam_v/<dotted>``, ``queue_v/<field>``, ``queue_s/<field>``. The JSON
metadata carries the step counter, effective config, vocabulary and the
batch-order state needed to resume.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .errors import ParseError

MAGIC = b"CMCK"
VERSION = 1


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict[str, Any] = field(default_factory=dict)

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        p = prefix + "/"
        return {k[len(p) :]: v for k, v in self.tensors.items() if k.startswith(p)}

    @property
    def step(self) -> int:
        return int(self.meta.get("step", 0))


def _u32(n: int) -> bytes:
    return struct.pack("<I", n)


def encode(ckpt: Checkpoint) -> bytes:
    meta = json.dumps(ckpt.meta, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, _u32(VERSION), _u32(len(meta)), meta, _u32(len(ckpt.tensors))]
    for name in sorted(ckpt.tensors):
        arr = np.asarray(ckpt.tensors[name], dtype=np.float64)
        raw = name.encode()
        parts += [_u32(len(raw)), raw, _u32(arr.ndim)]
        parts += [_u32(d) for d in arr.shape]
        parts.append(np.ascontiguousarray(arr).astype("<f8").tobytes())
    return b"".join(parts)


def decode(raw: bytes) -> Checkpoint:
    if raw[:4] != MAGIC:
        raise ParseError("not a CMCK checkpoint")
    pos = 4

    def u32() -> int:
        nonlocal pos
        if pos + 4 > len(raw):
            raise ParseError("truncated checkpoint")
        (v,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        return v

    version = u32()
    if version != VERSION:
        raise ParseError(f"unsupported checkpoint version {version}")
    n = u32()
    meta = json.loads(raw[pos : pos + n].decode())
    pos += n
    tensors = {}
    for _ in range(u32()):
        n = u32()
        name = raw[pos : pos + n].decode()
        pos += n
        shape = tuple(u32() for _ in range(u32()))
        count = int(np.prod(shape, dtype=np.int64))
        end = pos + 8 * count
        if end > len(raw):
            raise ParseError(f"truncated payload for {name}")
        tensors[name] = np.frombuffer(raw[pos:end], dtype="<f8").reshape(shape).astype(np.float64)
        pos = end
    if pos != len(raw):
        raise ParseError("trailing bytes after last record")
    return Checkpoint(tensors, meta)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(encode(ckpt))


def load_checkpoint(path: str | Path) -> Checkpoint:
    return decode(Path(path).read_bytes())
