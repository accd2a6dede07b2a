"""Portable tensor file format.

Layout (all little-endian)::

    b"MUTR" | version:u32 | dtype:u32 (0=f32, 1=f64) | rank:u32 | extents:u64*rank | data
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Union

import numpy as np

from .errors import ParseError

MAGIC = b"MUTR"
VERSION = 1
_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype not in _TAGS:
        raise TypeError(f"unsupported dtype {arr.dtype}; expected float32 or float64")
    header = MAGIC + struct.pack("<III", VERSION, _TAGS[arr.dtype], arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    body = np.ascontiguousarray(arr, dtype=_DTYPES[_TAGS[arr.dtype]]).tobytes()
    return header + body


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 16:
        raise ParseError("truncated header", len(buf))
    if buf[:4] != MAGIC:
        raise ParseError(f"bad magic {buf[:4]!r}", 0)
    version, tag, rank = struct.unpack_from("<III", buf, 4)
    if version != VERSION:
        raise ParseError(f"unsupported format version {version}", 4)
    if tag not in _DTYPES:
        raise ParseError(f"unknown dtype tag {tag}", 8)
    off = 16
    if len(buf) < off + 8 * rank:
        raise ParseError("truncated extents", len(buf))
    shape = struct.unpack_from(f"<{rank}Q", buf, off)
    off += 8 * rank
    dtype = _DTYPES[tag]
    need = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(buf) - off != need:
        raise ParseError(f"payload is {len(buf) - off} bytes, expected {need}", off)
    arr = np.frombuffer(buf, dtype=dtype, offset=off).reshape(shape)
    return arr.astype(dtype.newbyteorder("="))


def save_tensor(path: Union[str, Path], arr: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(arr))


def load_tensor(path: Union[str, Path]) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())
