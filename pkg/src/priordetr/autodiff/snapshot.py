"""Binary tensor snapshots.

Layout (little-endian): magic ``b"TNSR"``, rank as uint64, each dimension as
uint64, then the float64 payload in row-major order.
"""
from __future__ import annotations

import os
import struct
from typing import Union

import numpy as np

from .tensor import Tensor

MAGIC = b"TNSR"
PathLike = Union[str, os.PathLike]


def save_tensor(path: PathLike, value) -> None:
    arr = np.asarray(value.data if isinstance(value, Tensor) else value,
                     dtype="<f8", order="C")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.tobytes())


def load_tensor(path: PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    (rank,) = struct.unpack_from("<Q", blob, 4)
    dims = struct.unpack_from(f"<{rank}Q", blob, 12)
    offset = 12 + 8 * rank
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(blob) - offset != 8 * count:
        raise ValueError(
            f"{path}: payload has {len(blob) - offset} bytes, expected {8 * count}"
        )
    return np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(dims).copy()
