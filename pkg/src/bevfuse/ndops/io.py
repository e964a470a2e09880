"""Binary containers for tensors and point clouds.

Tensor container (".bbt"): little-endian, magic "BBT1", u32 rank,
u32 dims[rank], u8 dtype tag (0 = float32, 1 = float64), then raw row-major
data. Point cloud container (".bbpc"): magic "BBPC", u32 count, then
count x 4 float32 records (x, y, z, intensity).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

__all__ = ["write_tensor", "read_tensor", "write_points", "read_points"]

_TENSOR_MAGIC = b"BBT1"
_CLOUD_MAGIC = b"BBPC"
_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAG_OF = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def write_tensor(path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in _TAG_OF:
        raise ValueError(f"unsupported dtype {arr.dtype}; use float32 or float64")
    with open(path, "wb") as f:
        f.write(_TENSOR_MAGIC)
        f.write(struct.pack("<I", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(struct.pack("<B", _TAG_OF[arr.dtype]))
        f.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def read_tensor(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != _TENSOR_MAGIC:
        raise ValueError(f"{path}: bad magic {data[:4]!r}, expected {_TENSOR_MAGIC!r}")
    (rank,) = struct.unpack_from("<I", data, 4)
    dims = struct.unpack_from(f"<{rank}I", data, 8)
    (tag,) = struct.unpack_from("<B", data, 8 + 4 * rank)
    if tag not in _DTYPE_TAGS:
        raise ValueError(f"{path}: unknown dtype tag {tag}")
    dt = _DTYPE_TAGS[tag]
    off = 9 + 4 * rank
    n = int(np.prod(dims)) if rank else 1
    arr = np.frombuffer(data, dtype=dt, count=n, offset=off)
    return arr.reshape(dims).astype(dt.newbyteorder("="))


def write_points(path, pts: np.ndarray) -> None:
    pts = np.ascontiguousarray(pts, dtype="<f4")
    if pts.ndim != 2 or pts.shape[1] != 4:
        raise ValueError(f"point cloud must be (N,4), got {pts.shape}")
    with open(path, "wb") as f:
        f.write(_CLOUD_MAGIC)
        f.write(struct.pack("<I", pts.shape[0]))
        f.write(pts.tobytes())


def read_points(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != _CLOUD_MAGIC:
        raise ValueError(f"{path}: bad magic {data[:4]!r}, expected {_CLOUD_MAGIC!r}")
    (count,) = struct.unpack_from("<I", data, 4)
    arr = np.frombuffer(data, dtype="<f4", count=count * 4, offset=8)
    return arr.reshape(count, 4).astype(np.float32)
