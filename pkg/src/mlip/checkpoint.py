"""Named-tensor checkpoint files.

Layout (little-endian)::

    b"MLIPCKPT"  u32 version  u32 tensor_count
    per tensor:  u32 name_len  name(utf-8)  u32 rank  u32[rank] shape  f32[prod(shape)] data

Tensors are written in sorted name order so identical contents give identical
bytes.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Dict, Mapping, Union

import numpy as np

MAGIC = b"MLIPCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: Union[str, Path], tensors: Mapping[str, np.ndarray]) -> None:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(f"tensor {name!r} is not finite")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[: len(MAGIC)] != MAGIC:
        raise CheckpointError("bad magic; not a checkpoint file")
    off = len(MAGIC)
    version, count = struct.unpack_from("<II", buf, off)
    off += 8
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    out: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off : off + n].decode("utf-8")
        off += n
        (rank,) = struct.unpack_from("<I", buf, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(buf, dtype="<f4", count=size, offset=off)
        off += 4 * size
        out[name] = data.reshape(shape).astype(np.float32)
    if off != len(buf):
        raise CheckpointError("trailing bytes after the last tensor")
    return out


def encode_text(text: str) -> np.ndarray:
    """Store a string as a float tensor of its utf-8 byte values."""
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float32)


def decode_text(arr: np.ndarray) -> str:
    return bytes(np.asarray(arr).astype(np.uint8).tolist()).decode("utf-8")
