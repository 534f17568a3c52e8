"""Minimal binary PPM (P6) / PGM (P5) reader and writer."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ParseError


def _tokens(buf: bytes, count: int):
    """Read ``count`` whitespace-separated header tokens, skipping ``#`` comments."""
    out, i = [], 0
    while len(out) < count:
        while i < len(buf) and buf[i : i + 1].isspace():
            i += 1
        if i >= len(buf):
            raise ParseError("truncated header")
        if buf[i : i + 1] == b"#":
            while i < len(buf) and buf[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(buf) and not buf[j : j + 1].isspace():
            j += 1
        out.append(buf[i:j])
        i = j
    # exactly one whitespace byte separates header from raster
    return out, i + 1


def read_pnm(path) -> np.ndarray:
    """Return ``(H, W)`` for P5 or ``(H, W, 3)`` for P6, dtype uint8 or uint16."""
    buf = Path(path).read_bytes()
    toks, off = _tokens(buf, 4)
    magic = toks[0]
    if magic not in (b"P5", b"P6"):
        raise ParseError(f"{path}: unsupported magic {magic!r}")
    try:
        w, h, maxval = (int(t) for t in toks[1:])
    except ValueError:
        raise ParseError(f"{path}: malformed header") from None
    if not 0 < maxval < 65536:
        raise ParseError(f"{path}: maxval {maxval} out of range")
    ch = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    n = w * h * ch
    if len(buf) - off < n * dtype.itemsize:
        raise ParseError(f"{path}: truncated raster")
    img = np.frombuffer(buf, dtype=dtype, count=n, offset=off)
    img = img.astype(np.uint16 if maxval > 255 else np.uint8)
    return img.reshape((h, w, 3) if ch == 3 else (h, w))


def write_ppm(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ValueError(f"PPM needs (H, W, 3) uint8, got {img.shape} {img.dtype}")
    h, w = img.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + img.tobytes())


def write_pgm(path, img: np.ndarray, maxval: int = 65535) -> None:
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2-D array, got {img.shape}")
    if img.min(initial=0) < 0 or img.max(initial=0) > maxval:
        raise ValueError("PGM values out of range")
    h, w = img.shape
    dtype = ">u2" if maxval > 255 else "u1"
    raster = np.ascontiguousarray(img, dtype=dtype).tobytes()
    Path(path).write_bytes(f"P5\n{w} {h}\n{maxval}\n".encode() + raster)
