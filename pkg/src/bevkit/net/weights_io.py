"""Self-describing flat weight container.

Layout (little endian)::

    b"BEVW"  uint32 count
    repeated count times, sorted by name:
        uint32 name_len, name (utf-8), uint32 rank, uint32 dims[rank],
        float32 payload[prod(dims)]
"""

from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from ..errors import MalformedFile

MAGIC = b"BEVW"
_U32 = struct.Struct("<I")


def dumps(weights: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, _U32.pack(len(weights))]
    for name in sorted(weights):
        arr = np.ascontiguousarray(weights[name], dtype="<f4")
        key = name.encode("utf-8")
        parts += [_U32.pack(len(key)), key, _U32.pack(arr.ndim)]
        parts += [_U32.pack(d) for d in arr.shape]
        parts.append(arr.tobytes())
    return b"".join(parts)


def loads(raw: bytes) -> dict[str, np.ndarray]:
    if raw[:4] != MAGIC:
        raise MalformedFile("not a weight container (bad magic)")
    pos = 4

    def u32() -> int:
        nonlocal pos
        if pos + 4 > len(raw):
            raise MalformedFile("truncated weight container")
        (v,) = _U32.unpack_from(raw, pos)
        pos += 4
        return v

    out = {}
    for _ in range(u32()):
        n = u32()
        name = raw[pos : pos + n].decode("utf-8")
        pos += n
        dims = tuple(u32() for _ in range(u32()))
        nbytes = 4 * int(np.prod(dims, dtype=np.int64))
        if pos + nbytes > len(raw):
            raise MalformedFile(f"truncated payload for {name!r}")
        out[name] = np.frombuffer(raw, dtype="<f4", count=nbytes // 4, offset=pos).reshape(dims).astype(np.float32)
        pos += nbytes
    if pos != len(raw):
        raise MalformedFile(f"{len(raw) - pos} trailing bytes in weight container")
    return out


def save_weights(path: str | os.PathLike, weights: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(weights))


def load_weights(path: str | os.PathLike) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
