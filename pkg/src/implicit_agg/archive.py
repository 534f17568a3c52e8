"""Binary containers: ``IMGT`` named-tensor archives and ``IMGD`` descriptor files.

All integers and reals are little-endian. Layouts::

    IMGT: b"IMGT" | version u32 | count u32 |
          count * (name_len u16 | utf-8 name | rank u8 | rank * u64 extent | f64 data)
    IMGD: b"IMGD" | version u32 | count u32 | dim u32 | count * dim f64
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ParseError
from .tensor import Tensor

TENSOR_MAGIC = b"IMGT"
DESCRIPTOR_MAGIC = b"IMGD"
VERSION = 1


def save_tensors(path, tensors: Mapping[str, np.ndarray]) -> None:
    """Write ``name -> array`` pairs in insertion order."""
    chunks = [TENSOR_MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        if isinstance(arr, Tensor):
            arr = arr.data
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name[:40]}...")
        if arr.ndim > 255:
            raise ValueError(f"rank {arr.ndim} exceeds u8")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_tensors(path) -> dict:
    buf = Path(path).read_bytes()
    if buf[:4] != TENSOR_MAGIC:
        raise ParseError(f"{path}: not an IMGT archive")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise ParseError(f"{path}: unsupported IMGT version {version}")
    off = 12
    out = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off : off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", buf, off)
            off += 1
            shape = struct.unpack_from(f"<{rank}Q", buf, off)
            off += 8 * rank
            n = int(np.prod(shape)) if rank else 1
            if off + 8 * n > len(buf):
                raise ParseError(f"{path}: truncated data for tensor {name!r}")
            arr = np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(shape)
            off += 8 * n
            out[name] = arr.astype(np.float64)
    except struct.error as exc:
        raise ParseError(f"{path}: truncated archive ({exc})") from None
    return out


def save_descriptors(path, rows: np.ndarray) -> None:
    rows = np.ascontiguousarray(rows, dtype="<f8")
    if rows.ndim != 2:
        raise ValueError(f"descriptors must be 2-D, got shape {rows.shape}")
    header = DESCRIPTOR_MAGIC + struct.pack("<III", VERSION, rows.shape[0], rows.shape[1])
    Path(path).write_bytes(header + rows.tobytes())


def load_descriptors(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:4] != DESCRIPTOR_MAGIC:
        raise ParseError(f"{path}: not an IMGD file")
    version, count, dim = struct.unpack_from("<III", buf, 4)
    if version != VERSION:
        raise ParseError(f"{path}: unsupported IMGD version {version}")
    if len(buf) != 16 + 8 * count * dim:
        raise ParseError(f"{path}: expected {count}x{dim} reals, file size disagrees")
    return np.frombuffer(buf, dtype="<f8", offset=16).reshape(count, dim).astype(np.float64)
