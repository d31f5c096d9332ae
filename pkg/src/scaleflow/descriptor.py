"""SIFT descriptors at arbitrary scale, sparse or dense.

All extraction goes through one numba kernel, so a dense field and a
pointwise call with the same scale produce identical vectors.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass
from typing import Optional, Sequence

import numba
import numpy as np

from .image import to_grayscale
from .scalespace import ASSUMED_BLUR, gaussian_blur

DIM = 128
MAGNIFICATION = 3.0
CLAMP = 0.2
DSIFT_SIGMA = 8.0 / 3.0
QUANT_LEVELS = 10
MAX_QUANT_ERROR = 0.06
EXACT_LEVEL_FRACTION = 0.01
# gradients are taken on an octave-subsampled copy once sigma exceeds this
OCTAVE_SIGMA = 1.6
_NORM_EPS = 1e-12


@dataclass(frozen=True)
class GradientLevel:
    """Gradient magnitude/angle of the image blurred to ``sigma``.

    ``step`` is the subsampling factor (a power of two) relating level pixels
    to base-image pixels.
    """

    sigma: float
    step: int
    mag: np.ndarray
    ang: np.ndarray


def gradient_level(gray: np.ndarray, sigma: float) -> GradientLevel:
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    octave = max(0, int(math.floor(math.log2(sigma / OCTAVE_SIGMA))))
    step = 2 ** octave
    extra = math.sqrt(max(sigma ** 2 - ASSUMED_BLUR ** 2, 0.0))
    blurred = gaussian_blur(gray, extra) if extra > 1e-3 else np.asarray(gray, dtype=np.float64)
    blurred = blurred[::step, ::step]
    if min(blurred.shape) >= 2:
        gy, gx = np.gradient(blurred)
    else:
        gy = gx = np.zeros_like(blurred)
    return GradientLevel(sigma, step, np.hypot(gx, gy), np.arctan2(gy, gx))


@numba.njit(cache=True)
def _sift_one(mag, ang, xc, yc, bin_size, theta, out):
    h, w = mag.shape
    for i in range(DIM):
        out[i] = 0.0
    cos_t = math.cos(theta)
    sin_t = math.sin(theta)
    sig_w = 2.0 * bin_size
    inv_2s2 = 1.0 / (2.0 * sig_w * sig_w)
    reach = 2.5 * bin_size
    if theta != 0.0:
        reach *= math.sqrt(2.0)
    x0 = max(0, int(math.floor(xc - reach)))
    x1 = min(w - 1, int(math.ceil(xc + reach)))
    y0 = max(0, int(math.floor(yc - reach)))
    y1 = min(h - 1, int(math.ceil(yc + reach)))
    two_pi = 2.0 * math.pi
    for yy in range(y0, y1 + 1):
        dy = yy - yc
        for xx in range(x0, x1 + 1):
            m = mag[yy, xx]
            if m == 0.0:
                continue
            dx = xx - xc
            rx = (cos_t * dx + sin_t * dy) / bin_size
            ry = (-sin_t * dx + cos_t * dy) / bin_size
            cb = rx + 1.5
            rb = ry + 1.5
            if cb <= -1.0 or cb >= 4.0 or rb <= -1.0 or rb >= 4.0:
                continue
            wgt = m * math.exp(-(dx * dx + dy * dy) * inv_2s2)
            a = (ang[yy, xx] - theta) % two_pi
            ob = a * 8.0 / two_pi
            r0 = int(math.floor(rb))
            c0 = int(math.floor(cb))
            o0 = int(math.floor(ob))
            fr = rb - r0
            fc = cb - c0
            fo = ob - o0
            for ir in range(2):
                r = r0 + ir
                if r < 0 or r > 3:
                    continue
                wr = fr if ir == 1 else 1.0 - fr
                for ic in range(2):
                    c = c0 + ic
                    if c < 0 or c > 3:
                        continue
                    wc = fc if ic == 1 else 1.0 - fc
                    for io in range(2):
                        o = (o0 + io) % 8
                        wo = fo if io == 1 else 1.0 - fo
                        out[(r * 4 + c) * 8 + o] += wgt * wr * wc * wo
    norm = 0.0
    for i in range(DIM):
        norm += out[i] * out[i]
    norm = math.sqrt(norm)
    if norm < _NORM_EPS:
        for i in range(DIM):
            out[i] = 0.0
        return
    norm2 = 0.0
    for i in range(DIM):
        v = out[i] / norm
        if v > CLAMP:
            v = CLAMP
        out[i] = v
        norm2 += v * v
    norm2 = math.sqrt(norm2)
    for i in range(DIM):
        out[i] /= norm2


@numba.njit(cache=True)
def _sift_many(mag, ang, xs, ys, bin_sizes, thetas, out):
    for n in range(xs.shape[0]):
        _sift_one(mag, ang, xs[n], ys[n], bin_sizes[n], thetas[n], out[n])


def _extract_on_level(level: GradientLevel, xs, ys, thetas) -> np.ndarray:
    xs = np.asarray(xs, dtype=np.float64) / level.step
    ys = np.asarray(ys, dtype=np.float64) / level.step
    bin_size = MAGNIFICATION * level.sigma / level.step
    out = np.zeros((xs.shape[0], DIM), dtype=np.float64)
    _sift_many(level.mag, level.ang, xs, ys, np.full(xs.shape[0], bin_size),
               np.asarray(thetas, dtype=np.float64), out)
    return out


def extract_at(img: np.ndarray, x: float, y: float, sigma: float,
               orientation: float = 0.0) -> np.ndarray:
    """128-vector SIFT descriptor centred at ``(x, y)`` with bin size ``3 * sigma``."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    level = gradient_level(to_grayscale(img), sigma)
    return _extract_on_level(level, [x], [y], [orientation])[0]


def extract_keypoints(img: np.ndarray, keypoints: Sequence, upright: bool = False) -> np.ndarray:
    """Descriptors for many keypoints; blur levels are shared on a 2^(1/12) grid."""
    gray = to_grayscale(img)
    out = np.zeros((len(keypoints), DIM))
    if not keypoints:
        return out
    sig = np.array([kp.sigma for kp in keypoints])
    grid = 2.0 ** (np.round(12 * np.log2(sig)) / 12)
    for g in np.unique(grid):
        idx = np.flatnonzero(grid == g)
        level = gradient_level(gray, float(g))
        thetas = [0.0 if upright else keypoints[i].orientation for i in idx]
        out[idx] = _extract_on_level(level, [keypoints[i].x for i in idx],
                                     [keypoints[i].y for i in idx], thetas)
    return out


@dataclass(frozen=True)
class DenseDescriptorField:
    descriptors: np.ndarray  # (H, W, C) float32
    scale_source: str = "constant"

    @property
    def height(self) -> int:
        return self.descriptors.shape[0]

    @property
    def width(self) -> int:
        return self.descriptors.shape[1]

    @property
    def shape(self):
        return self.descriptors.shape[:2]


def _dense_on_level(level: GradientLevel, mask: Optional[np.ndarray], out: np.ndarray) -> None:
    h, w = out.shape[:2]
    if mask is None:
        ys, xs = np.mgrid[0:h, 0:w]
        ys, xs = ys.ravel(), xs.ravel()
    else:
        ys, xs = np.nonzero(mask)
    if ys.size == 0:
        return
    vals = _extract_on_level(level, xs, ys, np.zeros(xs.size))
    out[ys, xs] = vals


def extract_dense_constant(img: np.ndarray, sigma: float = DSIFT_SIGMA) -> DenseDescriptorField:
    gray = to_grayscale(img)
    out = np.zeros(gray.shape + (DIM,), dtype=np.float32)
    _dense_on_level(gradient_level(gray, sigma), None, out)
    return DenseDescriptorField(out, "constant")


def quantization_levels(smin: float, smax: float, min_levels: int = QUANT_LEVELS,
                        max_error: float = MAX_QUANT_ERROR) -> np.ndarray:
    """Log-spaced scale levels covering [smin, smax].

    Uses ``min_levels`` levels unless more are needed to keep the relative
    error of nearest-level rounding below ``max_error``.
    """
    if smax <= smin * (1 + 1e-12):
        return np.array([smin])
    ratio = math.log(smax / smin)
    max_step = 2.0 * math.log(1.0 + max_error)
    n = max(min_levels, int(math.ceil(ratio / max_step)) + 1)
    return np.exp(np.linspace(math.log(smin), math.log(smax), n))


def quantize_scales(scales: np.ndarray, exact_fraction: float = EXACT_LEVEL_FRACTION):
    """Returns (levels, per-pixel level index).

    Scale values held by at least ``exact_fraction`` of the pixels (seed values,
    constant regions) get a level of their own, so they are never rounded and
    their descriptors do not depend on the rest of the map. The remaining
    pixels round to log-spaced levels over their own range.
    """
    scales = np.asarray(scales, dtype=np.float64)
    vals, inverse, counts = np.unique(scales, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(scales.shape)
    is_exact = counts >= max(1.0, exact_fraction * scales.size)
    exact = vals[is_exact]
    idx = np.empty(scales.shape, dtype=np.intp)
    exact_slot = np.cumsum(is_exact) - 1
    on_exact = is_exact[inverse]
    idx[on_exact] = exact_slot[inverse[on_exact]]
    rest = scales[~on_exact]
    if rest.size == 0:
        return exact, idx
    grid = quantization_levels(float(rest.min()), float(rest.max()))
    if grid.size == 1:
        gidx = np.zeros(rest.shape, dtype=np.intp)
    else:
        logl = np.log(grid)
        ls = np.log(rest)
        pos = np.clip(np.searchsorted(logl, ls), 1, grid.size - 1)
        gidx = np.where(ls - logl[pos - 1] <= logl[pos] - ls, pos - 1, pos)
    idx[~on_exact] = exact.size + gidx
    return np.concatenate([exact, grid]), idx


def extract_dense_mapped(img: np.ndarray, scales) -> DenseDescriptorField:
    """Upright descriptor at every pixel with bin size ``3 * scale(p)``.

    ``scales`` is a ScaleMap or an (H, W) array of positive scales.
    """
    gray = to_grayscale(img)
    scales = np.asarray(getattr(scales, "scale", scales), dtype=np.float64)
    if scales.shape != gray.shape:
        raise ValueError(f"scale map {scales.shape} does not match image {gray.shape}")
    if not np.all(scales > 0):
        raise ValueError("scale map contains non-positive scales")
    levels, idx = quantize_scales(scales)
    out = np.zeros(gray.shape + (DIM,), dtype=np.float32)
    for i, sigma in enumerate(levels):
        mask = idx == i
        if mask.any():
            _dense_on_level(gradient_level(gray, float(sigma)), mask, out)
    return DenseDescriptorField(out, "scale-map")


def write_field(field: DenseDescriptorField, path: str | os.PathLike) -> None:
    """Binary dump: uint32 LE (width, height, dim) then row-major float32 LE."""
    h, w, c = field.descriptors.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<III", w, h, c))
        fh.write(np.ascontiguousarray(field.descriptors, dtype="<f4").tobytes())


def read_field(path: str | os.PathLike) -> DenseDescriptorField:
    with open(path, "rb") as fh:
        header = fh.read(12)
        if len(header) != 12:
            raise ValueError(f"{path}: truncated descriptor header")
        w, h, c = struct.unpack("<III", header)
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != w * h * c:
        raise ValueError(f"{path}: expected {w * h * c} floats, found {data.size}")
    return DenseDescriptorField(data.reshape(h, w, c).astype(np.float32), "file")


def l1_distance(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.abs(np.asarray(a, np.float64) - np.asarray(b, np.float64)).sum())
