"""Versioned little-endian binary tensor format.

Layout: ``b"TNSR1"``, uint32 rank, rank x uint64 extents, uint8 element
width (4 or 8 bytes), then the raw elements in C order.
"""

from __future__ import annotations

import io
import struct
from typing import BinaryIO

import numpy as np

from ..errors import FormatError
from .tensor import Tensor

MAGIC = b"TNSR1"
_WIDTH_DTYPE = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


def write_array(fh: BinaryIO, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    width = arr.dtype.itemsize
    if arr.dtype.kind != "f" or width not in _WIDTH_DTYPE:
        raise TypeError(f"cannot serialize dtype {arr.dtype}")
    fh.write(MAGIC)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(struct.pack("<B", width))
    fh.write(np.ascontiguousarray(arr, dtype=_WIDTH_DTYPE[width]).tobytes())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError("truncated tensor payload")
    return buf


def read_array(fh: BinaryIO) -> np.ndarray:
    magic = fh.read(len(MAGIC))
    if magic != MAGIC:
        if len(magic) < len(MAGIC):
            raise FormatError("truncated tensor header")
        raise FormatError(f"bad tensor magic {magic!r}")
    (rank,) = struct.unpack("<I", _read_exact(fh, 4))
    shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank))
    (width,) = struct.unpack("<B", _read_exact(fh, 1))
    if width not in _WIDTH_DTYPE:
        raise FormatError(f"unsupported element width {width}")
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    raw = _read_exact(fh, count * width)
    dtype = _WIDTH_DTYPE[width]
    return np.frombuffer(raw, dtype=dtype).astype(dtype.newbyteorder("="), copy=True).reshape(shape)


def dumps(t: Tensor | np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_array(buf, t.data if isinstance(t, Tensor) else t)
    return buf.getvalue()


def loads(data: bytes) -> Tensor:
    return Tensor(read_array(io.BytesIO(data)))


def save(t: Tensor | np.ndarray, path) -> None:
    with open(path, "wb") as fh:
        write_array(fh, t.data if isinstance(t, Tensor) else t)


def load(path) -> Tensor:
    with open(path, "rb") as fh:
        return Tensor(read_array(fh))
