"""Binary tensor encoding shared by dataset files and checkpoints.

Payload layout (all little-endian):
    u32 ndim, then ndim x u64 extents, then the float32 data row-major.
Standalone files carry the magic b"PFT1" in front of one payload.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

TENSOR_FILE_MAGIC = b"PFT1"


def write_payload(fh: BinaryIO, array: np.ndarray) -> None:
    array = np.asarray(array, dtype=np.float32)
    fh.write(struct.pack("<I", array.ndim))
    for extent in array.shape:
        fh.write(struct.pack("<Q", extent))
    fh.write(array.astype("<f4", copy=False).tobytes(order="C"))


def read_payload(fh: BinaryIO) -> np.ndarray:
    ndim = struct.unpack("<I", _read_exact(fh, 4))[0]
    shape = tuple(struct.unpack("<Q", _read_exact(fh, 8))[0] for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(_read_exact(fh, 4 * count), dtype="<f4").astype(np.float32)
    return data.reshape(shape)


def save_tensor(path, array: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(TENSOR_FILE_MAGIC)
        write_payload(fh, array)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != TENSOR_FILE_MAGIC:
            raise ValueError(f"{Path(path).name}: not a tensor file (magic {magic!r})")
        return read_payload(fh)


def _read_exact(fh: BinaryIO, count: int) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise EOFError(f"truncated tensor payload: wanted {count} bytes, got {len(data)}")
    return data
