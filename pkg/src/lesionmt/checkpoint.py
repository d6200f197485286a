"""Binary parameter checkpoints.

Layout, all integers little-endian::

    b"LMTK"                      magic
    u32  version                 currently 1
    u64  header length, bytes    UTF-8 JSON (model config); length 0 if absent
    u64  tensor count
    per tensor:
        u64  name length, bytes  UTF-8 name
        u64  rank
        u64  extents[rank]
        f64  values[prod(extents)]   row-major

Values are stored as raw IEEE-754 doubles, so a round trip is bit-exact.
"""
from __future__ import annotations

import json
import os
import struct
from collections.abc import Mapping

import numpy as np

from .errors import CheckpointError

MAGIC = b"LMTK"
VERSION = 1


def save_checkpoint(path: str | os.PathLike, tensors: Mapping[str, np.ndarray], header: dict | None = None) -> None:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    hdr = b"" if header is None else json.dumps(header, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<Q", len(hdr)))
    parts.append(hdr)
    parts.append(struct.pack("<Q", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        bname = name.encode("utf-8")
        parts.append(struct.pack("<Q", len(bname)))
        parts.append(bname)
        parts.append(struct.pack("<Q", arr.ndim))
        parts.append(np.asarray(arr.shape, dtype="<u8").tobytes())
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as f:
        f.write(b"".join(parts))
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict | None]:
    """Return ``(tensors, header)``; tensors keep file order."""
    with open(path, "rb") as f:
        buf = f.read()
    return decode_checkpoint(buf)


def decode_checkpoint(buf: bytes) -> tuple[dict[str, np.ndarray], dict | None]:
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"truncated checkpoint: need {n} bytes at offset {pos}, have {len(buf) - pos}")
        out = buf[pos : pos + n]
        pos += n
        return out

    if take(4) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<Q", take(8))
    header = json.loads(take(hlen).decode("utf-8")) if hlen else None
    (count,) = struct.unpack("<Q", take(8))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<Q", take(8))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<Q", take(8))
        shape = tuple(int(s) for s in np.frombuffer(take(8 * rank), dtype="<u8"))
        size = int(np.prod(shape)) if shape else 1
        values = np.frombuffer(take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
        if name in tensors:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        tensors[name] = values
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after last tensor")
    return tensors, header
