"""DoG interest points with characteristic scale selection."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import List

import numpy as np

from .image import to_grayscale
from .scalespace import DoGPyramid, ScaleSpace, build_dog, build_scale_space

DEFAULT_PEAK_THRESHOLD = 0.01
DEFAULT_EDGE_THRESHOLD = 10.0
MAX_OFFSET = 0.6
ORIENTATION_BINS = 36


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    sigma: float
    response: float
    orientation: float = 0.0


def _strict_extrema(stack: np.ndarray, threshold: float) -> np.ndarray:
    """(layer, row, col) of strict 26-neighbourhood extrema in interior layers."""
    core = stack[1:-1, 1:-1, 1:-1]
    L, H, W = stack.shape
    is_max = core > threshold
    is_min = core < -threshold
    for ds in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                if ds == dy == dx == 0:
                    continue
                nb = stack[1 + ds:L - 1 + ds, 1 + dy:H - 1 + dy, 1 + dx:W - 1 + dx]
                is_max &= core > nb
                is_min &= core < nb
    idx = np.argwhere(is_max | is_min)
    return idx + 1


def _refine(stack: np.ndarray, s: int, y: int, x: int):
    """One quadratic step; returns (offset[s, y, x], refined value, hessian2d)."""
    c = stack[s, y, x]
    dx = 0.5 * (stack[s, y, x + 1] - stack[s, y, x - 1])
    dy = 0.5 * (stack[s, y + 1, x] - stack[s, y - 1, x])
    ds = 0.5 * (stack[s + 1, y, x] - stack[s - 1, y, x])
    dxx = stack[s, y, x + 1] + stack[s, y, x - 1] - 2 * c
    dyy = stack[s, y + 1, x] + stack[s, y - 1, x] - 2 * c
    dss = stack[s + 1, y, x] + stack[s - 1, y, x] - 2 * c
    dxy = 0.25 * (stack[s, y + 1, x + 1] - stack[s, y + 1, x - 1]
                  - stack[s, y - 1, x + 1] + stack[s, y - 1, x - 1])
    dxs = 0.25 * (stack[s + 1, y, x + 1] - stack[s + 1, y, x - 1]
                  - stack[s - 1, y, x + 1] + stack[s - 1, y, x - 1])
    dys = 0.25 * (stack[s + 1, y + 1, x] - stack[s + 1, y - 1, x]
                  - stack[s - 1, y + 1, x] + stack[s - 1, y - 1, x])
    grad = np.array([ds, dy, dx])
    hess = np.array([[dss, dys, dxs], [dys, dyy, dxy], [dxs, dxy, dxx]])
    try:
        offset = -np.linalg.solve(hess, grad)
    except np.linalg.LinAlgError:
        return None
    value = c + 0.5 * grad @ offset
    return offset, value, (dxx, dyy, dxy)


def detect(
    dog: DoGPyramid,
    peak_threshold: float = DEFAULT_PEAK_THRESHOLD,
    edge_threshold: float = DEFAULT_EDGE_THRESHOLD,
) -> List[Keypoint]:
    """Scale-space extrema of the DoG pyramid, refined and filtered.

    Candidates are strict extrema among their 26 space-scale neighbours. Each
    gets one second-order Taylor step; points whose offset exceeds 0.6 in any
    dimension, whose refined |response| is below ``peak_threshold``, or whose
    principal-curvature ratio exceeds ``edge_threshold`` are dropped.
    Returned coordinates and scales are in base-image pixels.
    """
    height, width = dog.base_shape
    edge_bound = (edge_threshold + 1.0) ** 2 / edge_threshold
    keypoints: List[Keypoint] = []
    for o, stack in enumerate(dog.stacks):
        if stack.shape[0] < 3 or min(stack.shape[1:]) < 3:
            continue
        step = 2.0 ** o
        for s, y, x in _strict_extrema(stack, 0.5 * peak_threshold):
            refined = _refine(stack, s, y, x)
            if refined is None:
                continue
            offset, value, (dxx, dyy, dxy) = refined
            if np.any(np.abs(offset) > MAX_OFFSET) or abs(value) < peak_threshold:
                continue
            det = dxx * dyy - dxy * dxy
            if det <= 0 or (dxx + dyy) ** 2 / det >= edge_bound:
                continue
            kx = (x + offset[2]) * step
            ky = (y + offset[1]) * step
            if not (0 <= kx < width and 0 <= ky < height):
                continue
            sigma = dog.sigma(o, s + offset[0])
            keypoints.append(Keypoint(float(kx), float(ky), float(sigma), float(value)))
    return keypoints


def assign_orientation(ss: ScaleSpace, kp: Keypoint) -> Keypoint:
    """Dominant gradient direction around ``kp`` (radians, image axes, y down)."""
    o, s = ss.nearest_level(kp.sigma)
    img = ss.gaussians[o][s]
    step = 2.0 ** o
    sig_w = 1.5 * ss.sigma(o, s) / step
    radius = int(round(3.0 * sig_w))
    cx, cy = kp.x / step, kp.y / step
    h, w = img.shape
    x0, x1 = max(1, int(round(cx)) - radius), min(w - 2, int(round(cx)) + radius)
    y0, y1 = max(1, int(round(cy)) - radius), min(h - 2, int(round(cy)) + radius)
    hist = np.zeros(ORIENTATION_BINS)
    if x1 >= x0 and y1 >= y0:
        ys, xs = np.mgrid[y0:y1 + 1, x0:x1 + 1]
        gx = 0.5 * (img[ys, xs + 1] - img[ys, xs - 1])
        gy = 0.5 * (img[ys + 1, xs] - img[ys - 1, xs])
        weight = np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * sig_w ** 2))
        ang = np.mod(np.arctan2(gy, gx), 2 * np.pi)
        bins = np.floor(ang * ORIENTATION_BINS / (2 * np.pi)).astype(int) % ORIENTATION_BINS
        np.add.at(hist, bins.ravel(), (weight * np.hypot(gx, gy)).ravel())
    if not hist.any():
        return replace(kp, orientation=0.0)
    k = int(np.argmax(hist))
    left, right = hist[k - 1], hist[(k + 1) % ORIENTATION_BINS]
    denom = left - 2 * hist[k] + right
    shift = 0.5 * (left - right) / denom if denom < 0 else 0.0
    theta = (k + 0.5 + shift) * 2 * np.pi / ORIENTATION_BINS
    return replace(kp, orientation=float(math.fmod(theta, 2 * np.pi)))


def detect_image(
    img: np.ndarray,
    peak_threshold: float = DEFAULT_PEAK_THRESHOLD,
    edge_threshold: float = DEFAULT_EDGE_THRESHOLD,
    octaves=None,
    levels: int = 3,
    sigma0: float = 1.6,
    orient: bool = True,
) -> List[Keypoint]:
    """Convenience: scale space, DoG, detection and orientation in one call.

    Colour images are converted to luma first.
    """
    ss = build_scale_space(to_grayscale(img), octaves=octaves, levels=levels, sigma0=sigma0)
    kps = detect(build_dog(ss), peak_threshold, edge_threshold)
    if orient:
        kps = [assign_orientation(ss, kp) for kp in kps]
    return kps
