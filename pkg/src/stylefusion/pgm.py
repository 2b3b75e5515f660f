"""Binary (P5) 8-bit PGM reading and writing."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def _tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    """Pull ``count`` whitespace-separated header tokens, skipping '#' comments."""
    out = []
    i = 0
    while len(out) < count:
        while i < len(buf) and buf[i : i + 1].isspace():
            i += 1
        if buf[i : i + 1] == b"#":
            while i < len(buf) and buf[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(buf) and not buf[j : j + 1].isspace():
            j += 1
        if j == i:
            raise ValueError("truncated PGM header")
        out.append(buf[i:j])
        i = j
    return out, i + 1  # exactly one whitespace byte precedes the raster


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    (magic, w, h, maxval), start = _tokens(buf, 4)
    if magic != b"P5":
        raise ValueError(f"{path}: only binary P5 PGM is supported, got {magic!r}")
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM (maxval 255) is supported, got {maxval}")
    raster = buf[start : start + w * h]
    if len(raster) != w * h:
        raise ValueError(f"{path}: raster has {len(raster)} bytes, expected {w * h}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w).copy()


def write_pgm(path, pixels: np.ndarray) -> None:
    px = np.asarray(pixels)
    if px.ndim != 2 or px.dtype != np.uint8:
        raise ValueError(f"write_pgm expects a 2-D uint8 array, got {px.dtype} {px.shape}")
    h, w = px.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + px.tobytes())


def to_preview(field: np.ndarray) -> np.ndarray:
    """Min-max normalize a 2-D field to 0..255; a constant field maps to 0."""
    f = np.asarray(field, dtype=np.float64)
    lo, hi = f.min(), f.max()
    if hi <= lo:
        return np.zeros(f.shape, dtype=np.uint8)
    return np.round((f - lo) / (hi - lo) * 255.0).astype(np.uint8)
