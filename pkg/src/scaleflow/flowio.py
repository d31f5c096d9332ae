"""Middlebury ``.flo`` files and PFM scale maps."""

from __future__ import annotations

import os
import struct
from typing import Tuple

import numpy as np

FLO_MAGIC = 202021.25
UNKNOWN_FLOW_THRESHOLD = 1e9
UNKNOWN_FLOW = 1e10


class FloFormatError(ValueError):
    pass


def write_flo(path: str | os.PathLike, u: np.ndarray, v: np.ndarray) -> None:
    u = np.asarray(u)
    v = np.asarray(v)
    if u.shape != v.shape or u.ndim != 2:
        raise ValueError("u and v must be 2-D arrays of equal shape")
    h, w = u.shape
    data = np.empty((h, w, 2), dtype="<f4")
    data[..., 0] = u
    data[..., 1] = v
    with open(path, "wb") as fh:
        fh.write(struct.pack("<f", FLO_MAGIC))
        fh.write(struct.pack("<ii", w, h))
        fh.write(data.tobytes())


def read_flo(path: str | os.PathLike) -> Tuple[np.ndarray, np.ndarray]:
    """Returns float32 ``(u, v)`` arrays of shape (H, W)."""
    with open(path, "rb") as fh:
        header = fh.read(12)
        if len(header) < 12:
            raise FloFormatError(f"{path}: truncated header")
        (magic,) = struct.unpack("<f", header[:4])
        if magic != np.float32(FLO_MAGIC):
            raise FloFormatError(f"{path}: bad magic {magic!r}")
        w, h = struct.unpack("<ii", header[4:])
        if w <= 0 or h <= 0:
            raise FloFormatError(f"{path}: invalid size {w}x{h}")
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != w * h * 2:
        raise FloFormatError(f"{path}: expected {w * h * 2} floats, got {data.size}")
    data = data.reshape(h, w, 2)
    return data[..., 0].copy(), data[..., 1].copy()


def unknown_mask(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    return (np.abs(u) > UNKNOWN_FLOW_THRESHOLD) | (np.abs(v) > UNKNOWN_FLOW_THRESHOLD) | \
        ~np.isfinite(u) | ~np.isfinite(v)


def write_pfm(path: str | os.PathLike, data: np.ndarray) -> None:
    """Grayscale PFM, little-endian, rows stored bottom to top."""
    data = np.asarray(data, dtype="<f4")
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(data[::-1]).tobytes())


def read_pfm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        kind = fh.readline().strip()
        if kind not in (b"Pf", b"PF"):
            raise ValueError(f"{path}: not a PFM file")
        dims = fh.readline().split()
        while not dims:
            dims = fh.readline().split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(fh.readline().strip())
        dtype = "<f4" if scale < 0 else ">f4"
        channels = 3 if kind == b"PF" else 1
        data = np.frombuffer(fh.read(), dtype=dtype)
    data = data[: w * h * channels].reshape(h, w, channels)[::-1]
    out = data[..., 0] if channels == 1 else data
    return np.ascontiguousarray(out, dtype=np.float32)
