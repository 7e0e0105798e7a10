"""Flat binary parameter container.

Layout (all little-endian)::

    b"IKMRCKPT"  u32 version
    repeated until EOF:
        u32 name_len, name bytes (UTF-8), u32 rank, u64 extent * rank,
        f64 payload (row-major)
"""

import struct
from pathlib import Path

import numpy as np

from ..errors import CheckpointError

MAGIC = b"IKMRCKPT"
VERSION = 1


def encode(tensors) -> bytes:
    """Serialize an ordered mapping ``name -> array`` to bytes."""
    parts = [MAGIC, struct.pack("<I", VERSION)]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def decode(data: bytes) -> dict:
    if data[:8] != MAGIC:
        raise CheckpointError("not an IKMRCKPT container")
    try:
        (version,) = struct.unpack_from("<I", data, 8)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos, out = 12, {}
        while pos < len(data):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos : pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}Q", data, pos)
            pos += 8 * rank
            if name in out:
                raise CheckpointError(f"duplicate tensor {name!r}")
            count = int(np.prod(shape, dtype=np.int64))
            if pos + 8 * count > len(data):
                raise CheckpointError(f"truncated payload for tensor {name!r}")
            out[name] = np.frombuffer(data, dtype="<f8", count=count, offset=pos).astype(np.float64).reshape(shape)
            pos += 8 * count
        return out
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from exc


def save(tensors, path):
    Path(path).write_bytes(encode(tensors))


def load(path) -> dict:
    return decode(Path(path).read_bytes())
