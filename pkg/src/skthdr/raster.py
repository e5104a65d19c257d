"""Binary raster containers.

Plane files (magic ``SKB1``)::

    b"SKB1" | u32 count | u32 C | u32 H | u32 W | count*C*H*W float32

all little-endian, planes in C-major then row-major order.  A mask file is a
single block with ``count=K, C=1``.  A multi-level feature file is a run of
blocks, one per level, each carrying ``count=L`` (the number of levels) and
its own ``C, H, W``.

Named-tensor files (``CKPT`` checkpoints, ``SCN1`` scenes) share the header
shape but store ordered, named float64 tensors::

    magic | u32 n_tensors | u32 itemsize(=8) | u32 0 | u32 0
    repeated: u32 name_len | name utf-8 | u32 ndim | ndim*u32 dims | data
"""
from __future__ import annotations

import math
import mmap
import os
import struct
from typing import Callable, Dict, List, Optional

import numpy as np

from .errors import FormatError

_HEADER = struct.Struct("<4sIIII")


def write_planes(path, array: np.ndarray, magic: bytes = b"SKB1"):
    arr = np.asarray(array, dtype="<f4")
    if arr.ndim != 4:
        raise ValueError("plane block must be [count, C, H, W]")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(magic, *arr.shape))
        fh.write(arr.tobytes(order="C"))


def _read_header(fh, magic: bytes):
    head = fh.read(_HEADER.size)
    if len(head) != _HEADER.size:
        raise FormatError("truncated header")
    got, count, c, h, w = _HEADER.unpack(head)
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")
    return count, c, h, w


def _read_floats(fh, shape) -> np.ndarray:
    n = int(np.prod(shape, dtype=np.int64))
    if n > 1 << 31:
        raise FormatError("implausible block size")
    raw = fh.read(4 * n)
    if len(raw) != 4 * n:
        raise FormatError("truncated plane data")
    return np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)


def read_planes(path, magic: bytes = b"SKB1") -> np.ndarray:
    with open(path, "rb") as fh:
        count, c, h, w = _read_header(fh, magic)
        arr = _read_floats(fh, (count, c, h, w))
        if fh.read(1):
            raise FormatError("trailing bytes after plane block")
    return arr


def write_levels(path, levels: List[np.ndarray], magic: bytes = b"SKB1"):
    count = len(levels)
    with open(path, "wb") as fh:
        for lvl in levels:
            arr = np.asarray(lvl, dtype="<f4")
            if arr.ndim != 3:
                raise ValueError("each level must be [C, H, W]")
            fh.write(_HEADER.pack(magic, count, *arr.shape))
            fh.write(arr.tobytes(order="C"))


def read_levels(path, magic: bytes = b"SKB1") -> List[np.ndarray]:
    out = []
    with open(path, "rb") as fh:
        count = None
        while True:
            if count is not None and len(out) == count:
                break
            n_levels, c, h, w = _read_header(fh, magic)
            if count is None:
                if not 0 < n_levels <= 64:
                    raise FormatError(f"implausible level count {n_levels}")
                count = n_levels
            elif n_levels != count:
                raise FormatError("inconsistent level count between blocks")
            out.append(_read_floats(fh, (c, h, w)))
        if fh.read(1):
            raise FormatError("trailing bytes after last level")
    return out


def write_named(path, tensors: Dict[str, np.ndarray], magic: bytes = b"CKPT"):
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(magic, len(tensors), 8, 0, 0))
        for name, value in tensors.items():
            arr = np.ascontiguousarray(value, dtype="<f8")
            key = name.encode("utf-8")
            fh.write(struct.pack("<I", len(key)))
            fh.write(key)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes(order="C"))


def read_named(path, magic: bytes = b"CKPT",
               select: Optional[Callable[[str], bool]] = None,
               stop: Optional[Callable[[Dict[str, np.ndarray]], bool]] = None) -> Dict[str, np.ndarray]:
    """Read named tensors; entries rejected by ``select`` are skipped undecoded.

    The file is memory-mapped, so a skipped entry costs one header parse and
    none of its data pages are touched.  ``stop`` is called after each kept
    entry; once it returns true the rest of the file is left unread.
    """
    out: Dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        size = os.fstat(fh.fileno()).st_size
        if size < _HEADER.size:
            raise FormatError("truncated header")
        with mmap.mmap(fh.fileno(), 0, access=mmap.ACCESS_READ) as buf:
            got, count, itemsize, _, _ = _HEADER.unpack_from(buf, 0)
            if got != magic:
                raise FormatError(f"bad magic {got!r}, expected {magic!r}")
            if itemsize != 8:
                raise FormatError(f"unsupported item size {itemsize}")
            pos = _HEADER.size
            for _ in range(count):
                (nlen,) = _unpack("<I", buf, pos, size)
                pos += 4
                if pos + nlen > size:
                    raise FormatError("truncated record")
                name = bytes(buf[pos:pos + nlen]).decode("utf-8")
                pos += nlen
                (ndim,) = _unpack("<I", buf, pos, size)
                pos += 4
                shape = _unpack(f"<{ndim}I", buf, pos, size) if ndim else ()
                pos += 4 * ndim
                nbytes = 8 * math.prod(shape)
                if pos + nbytes > size:
                    raise FormatError("truncated record")
                if select is None or select(name):
                    out[name] = np.frombuffer(buf, dtype="<f8", count=nbytes // 8, offset=pos
                                              ).astype(np.float64).reshape(shape)
                    if stop is not None and stop(out):
                        return out
                pos += nbytes
            if pos != size:
                raise FormatError("trailing bytes after last tensor")
    return out


def _unpack(fmt: str, buf, pos: int, size: int):
    if pos + struct.calcsize(fmt) > size:
        raise FormatError("truncated record")
    return struct.unpack_from(fmt, buf, pos)


def list_named(path, magic: bytes = b"CKPT") -> List[str]:
    names: List[str] = []
    read_named(path, magic, select=lambda n: names.append(n) and False)
    return names


def _exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError("truncated record")
    return data
