"""RTD1 raw tensor dumps.

Layout: 8-byte magic "RTDUMP01", u32 rank, rank x u32 dims, then
little-endian float32 payload in row-major order.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"RTDUMP01"


class RTDError(ValueError):
    pass


def dump_bytes(array: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(array, dtype="<f4")
    head = MAGIC + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def load_bytes(blob: bytes) -> np.ndarray:
    if blob[:8] != MAGIC:
        raise RTDError("bad RTD1 magic")
    (rank,) = struct.unpack_from("<I", blob, 8)
    dims = struct.unpack_from(f"<{rank}I", blob, 12)
    offset = 12 + 4 * rank
    count = int(np.prod(dims)) if rank else 1
    payload = blob[offset:]
    if len(payload) != 4 * count:
        raise RTDError(f"RTD1 payload size {len(payload)} != {4 * count}")
    data = np.frombuffer(payload, dtype="<f4", count=count)
    return data.reshape(dims).astype(np.float32)


def write(path, array: np.ndarray) -> None:
    Path(path).write_bytes(dump_bytes(array))


def read(path) -> np.ndarray:
    return load_bytes(Path(path).read_bytes())
