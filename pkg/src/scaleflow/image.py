"""Image loading, conversion and resampling.

Images are plain numpy arrays of float64 samples in [0, 1], shaped ``(H, W)``
for grayscale or ``(H, W, 3)`` for RGB. 8-bit values only exist at the file
boundary.
"""

from __future__ import annotations

import os
from typing import Tuple

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])

_SUPPORTED_READ = {"PNG", "PPM"}  # Pillow reports PGM/PBM as "PPM"


class ImageError(Exception):
    """Base class for image I/O failures."""


class MissingFileError(ImageError, FileNotFoundError):
    pass


class UnsupportedFormatError(ImageError):
    pass


class CorruptImageError(ImageError):
    pass


def load_image(path: str | os.PathLike) -> np.ndarray:
    """Read a PNG or binary PPM/PGM file into a float image in [0, 1]."""
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise MissingFileError(f"no such image file: {path}")
    try:
        pil = PILImage.open(path)
    except PILImage.UnidentifiedImageError as exc:
        raise UnsupportedFormatError(f"unrecognised image format: {path}") from exc
    except OSError as exc:
        raise CorruptImageError(f"cannot read {path}: {exc}") from exc
    with pil:
        if pil.format not in _SUPPORTED_READ:
            raise UnsupportedFormatError(
                f"{path}: format {pil.format} not supported (PNG, PPM, PGM only)"
            )
        try:
            pil.load()
        except (OSError, ValueError, SyntaxError) as exc:
            raise CorruptImageError(f"corrupt image stream in {path}: {exc}") from exc
        return _pil_to_float(pil)


def _pil_to_float(pil: PILImage.Image) -> np.ndarray:
    mode = pil.mode
    if mode in ("I;16", "I;16B", "I;16L", "I"):
        arr = np.asarray(pil, dtype=np.float64)
        return np.clip(arr / 65535.0, 0.0, 1.0)
    if mode in ("1", "L", "P", "LA", "PA"):
        if mode != "L":
            pil = pil.convert("RGB" if mode in ("P", "PA") else "L")
    if pil.mode not in ("L", "RGB"):
        pil = pil.convert("RGB")
    return np.asarray(pil, dtype=np.float64) / 255.0


def save_png(img: np.ndarray, path: str | os.PathLike) -> None:
    """Write a [0, 1] float image as 8-bit PNG."""
    data = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    data = np.floor(data * 255.0 + 0.5).astype(np.uint8)
    PILImage.fromarray(data).save(os.fspath(path), format="PNG")


def to_grayscale(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.ndim == 3 and img.shape[2] == 1:
        return img[:, :, 0]
    if img.ndim == 3 and img.shape[2] == 3:
        return img @ LUMA_WEIGHTS
    raise ValueError(f"expected 1 or 3 channels, got shape {img.shape}")


def _output_dims(shape: Tuple[int, ...], factor: float) -> Tuple[int, int]:
    if not factor > 0:
        raise ValueError(f"resize factor must be positive, got {factor}")
    h = int(np.floor(shape[0] * factor + 0.5))
    w = int(np.floor(shape[1] * factor + 0.5))
    if h < 1 or w < 1:
        raise ValueError(f"factor {factor} shrinks {shape[:2]} to zero size")
    return h, w


def resize(img: np.ndarray, factor: float, antialias: bool = True) -> np.ndarray:
    """Bilinear resampling by ``factor``; output dims are ``round(dim * factor)``.

    Pixel centres are aligned, i.e. output pixel ``i`` samples input coordinate
    ``(i + 0.5) * in / out - 0.5``. When shrinking, a Gaussian prefilter of
    width ``0.5 * sqrt(1/f^2 - 1)`` suppresses aliasing.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = _output_dims(img.shape, factor)
    return resize_to(img, (h, w), antialias=antialias)


def resize_to(img: np.ndarray, shape: Tuple[int, int], antialias: bool = True) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    h, w = shape
    in_h, in_w = img.shape[:2]
    sy, sx = in_h / h, in_w / w
    if antialias and (sy > 1 or sx > 1):
        sig = [0.5 * np.sqrt(max(s * s - 1.0, 0.0)) for s in (sy, sx)]
        if img.ndim == 3:
            sig.append(0.0)
        img = ndimage.gaussian_filter(img, sig, mode="reflect", truncate=4.0)
    ys = np.clip((np.arange(h) + 0.5) * sy - 0.5, 0, in_h - 1)
    xs = np.clip((np.arange(w) + 0.5) * sx - 0.5, 0, in_w - 1)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    out, _ = _bilinear(img, yy, xx)
    return out


def _bilinear(img: np.ndarray, yy: np.ndarray, xx: np.ndarray):
    """Sample ``img`` at float coordinates; returns (values, inside-mask)."""
    in_h, in_w = img.shape[:2]
    inside = (yy >= 0) & (yy <= in_h - 1) & (xx >= 0) & (xx <= in_w - 1)
    yc = np.clip(yy, 0, in_h - 1)
    xc = np.clip(xx, 0, in_w - 1)
    y0 = np.floor(yc).astype(np.intp)
    x0 = np.floor(xc).astype(np.intp)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    fy = yc - y0
    fx = xc - x0
    if img.ndim == 3:
        fy = fy[..., None]
        fx = fx[..., None]
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy, inside


def warp_backward(target: np.ndarray, u: np.ndarray, v: np.ndarray):
    """Pull ``target`` colours back along the flow: ``out(p) = target(p + w(p))``.

    ``u`` and ``v`` define the output geometry. Samples landing outside the
    target are zero and flagged ``False`` in the returned validity mask.
    """
    target = np.asarray(target, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    h, w = u.shape
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                         indexing="ij")
    out, valid = _bilinear(target, yy + v, xx + u)
    if out.ndim == 3:
        out[~valid] = 0.0
    else:
        out = np.where(valid, out, 0.0)
    return out, valid


def pad_to(img: np.ndarray, shape: Tuple[int, int], center: bool = True):
    """Zero-pad ``img`` to ``shape``; returns (padded, (x_offset, y_offset))."""
    h, w = img.shape[:2]
    H, W = shape
    if h > H or w > W:
        raise ValueError(f"cannot pad {img.shape[:2]} into smaller {shape}")
    oy = (H - h) // 2 if center else 0
    ox = (W - w) // 2 if center else 0
    out = np.zeros((H, W) + img.shape[2:], dtype=np.float64)
    out[oy:oy + h, ox:ox + w] = img
    return out, (ox, oy)
