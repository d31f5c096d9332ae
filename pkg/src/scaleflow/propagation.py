"""Dense scale maps from sparse detector scales.

Three ways of spreading keypoint scales to every pixel:

* geometric: each pixel's scale is the plain average of its 8 neighbours';
* image-aware: neighbours are weighted by local intensity correlation;
* match-aware: only keypoints matched between the two images seed the maps.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import List, NamedTuple, Sequence, Tuple

import numpy as np

from . import solver
from .descriptor import extract_keypoints
from .detector import Keypoint
from .image import to_grayscale

log = logging.getLogger(__name__)

SIGMA_MIN = 0.5
SIGMA_MAX = 24.0
NCC_EPS = 1e-6
KEEP_FRACTION = 0.20
# uniform affinity mixed in only when image-aware weights leave a region
# with no path to any seed (singular system)
LEAK = 1e-3

SCHEMES = ("geometric", "image")


class Seed(NamedTuple):
    x: int
    y: int
    sigma: float


@dataclass(frozen=True)
class ScaleMap:
    scale: np.ndarray  # (H, W) float64
    seed_mask: np.ndarray  # (H, W) bool
    method: str

    @property
    def shape(self):
        return self.scale.shape


@dataclass(frozen=True)
class SparseMatch:
    kp_a: Keypoint
    kp_b: Keypoint
    ratio: float


class NoMatchesError(ValueError):
    """Raised when match-aware seeding finds nothing to propagate."""


def seeds_from_keypoints(kps: Sequence[Keypoint], shape: Tuple[int, int],
                         sigma_min: float = SIGMA_MIN, sigma_max: float = SIGMA_MAX) -> List[Seed]:
    """Round keypoints to pixels; on collision the largest |response| wins."""
    if not kps:
        raise ValueError("no keypoints to seed from")
    h, w = shape
    best = {}
    for kp in kps:
        x = min(max(int(math.floor(kp.x + 0.5)), 0), w - 1)
        y = min(max(int(math.floor(kp.y + 0.5)), 0), h - 1)
        prev = best.get((x, y))
        if prev is None or abs(kp.response) > abs(prev.response):
            best[(x, y)] = kp
    return [
        Seed(x, y, float(np.clip(kp.sigma, sigma_min, sigma_max)))
        for (x, y), kp in sorted(best.items(), key=lambda item: (item[0][1], item[0][0]))
    ]


def _neighbour_valid(shape: Tuple[int, int]) -> np.ndarray:
    h, w = shape
    valid = np.zeros((h, w, 3, 3), dtype=bool)
    ys = np.arange(h)[:, None]
    xs = np.arange(w)[None, :]
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == dx == 0:
                continue
            valid[:, :, 1 + dy, 1 + dx] = (
                (ys + dy >= 0) & (ys + dy < h) & (xs + dx >= 0) & (xs + dx < w)
            )
    return valid


def uniform_weights(shape: Tuple[int, int]) -> np.ndarray:
    """8-neighbour stencils with weight ``1 / |N(p)|`` (8 inside, 5 edge, 3 corner)."""
    valid = _neighbour_valid(shape).astype(np.float64)
    return valid / valid.sum(axis=(2, 3), keepdims=True)


def _patch_stack(gray: np.ndarray) -> np.ndarray:
    """(H, W, 3, 3) neighbourhoods, nan outside the image."""
    h, w = gray.shape
    padded = np.pad(gray, 1, constant_values=np.nan)
    out = np.empty((h, w, 3, 3))
    for dy in range(3):
        for dx in range(3):
            out[:, :, dy, dx] = padded[dy:dy + h, dx:dx + w]
    return out


def ncc_weights(img: np.ndarray, normalize: bool = True) -> np.ndarray:
    """Intensity-correlation affinities.

    ``w_pq = 1 + (I(p) - mu_p)(I(q) - mu_p) / var_p`` with the mean and
    variance taken over the 3x3 neighbourhood of ``p``. With ``normalize``
    the affinities are clipped at zero and divided by their sum, so every
    stencil is a convex combination; negative weights otherwise let the
    solution overshoot the seeds without bound. Where the variance is below
    ``NCC_EPS`` or the clipped sum vanishes, the uniform stencil is used.
    """
    gray = to_grayscale(img)
    patches = _patch_stack(gray)
    valid = _neighbour_valid(gray.shape)
    mu = np.nanmean(patches, axis=(2, 3))
    var = np.nanvar(patches, axis=(2, 3))
    centre = (gray - mu)[:, :, None, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        raw = 1.0 + centre * (patches - mu[:, :, None, None]) / var[:, :, None, None]
    raw = np.where(valid, raw, 0.0)
    if not normalize:
        return np.where((var < NCC_EPS)[:, :, None, None], np.nan, raw)
    uniform = uniform_weights(gray.shape)
    raw = np.maximum(raw, 0.0)
    total = raw.sum(axis=(2, 3), keepdims=True)
    flat = (var < NCC_EPS)[:, :, None, None] | (np.abs(total) < NCC_EPS)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(flat, uniform, raw / total)
    return out


def _seed_pairs(seeds: Sequence[Seed]):
    return [((s.x, s.y), s.sigma) for s in seeds]


def propagate(img: np.ndarray, seeds: Sequence[Seed], scheme: str = "geometric",
              sigma_min: float = SIGMA_MIN, sigma_max: float = SIGMA_MAX,
              tol: float = 1e-6) -> ScaleMap:
    """Minimise the neighbour-consistency cost with the seeds held fixed."""
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
    if not seeds:
        raise ValueError("at least one seed is required")
    gray = to_grayscale(img)
    shape = gray.shape
    stencils = uniform_weights(shape) if scheme == "geometric" else ncc_weights(gray)
    pairs = _seed_pairs(seeds)
    try:
        result = solver.solve(solver.assemble(shape, stencils, pairs), tol=tol)
    except solver.SolverError:
        if scheme == "geometric":
            raise
        log.info("image-aware system singular; mixing in %.0e uniform affinity", LEAK)
        stencils = (1 - LEAK) * stencils + LEAK * uniform_weights(shape)
        result = solver.solve(solver.assemble(shape, stencils, pairs), tol=tol)
    scale = np.clip(result.values, sigma_min, sigma_max)
    mask = np.zeros(shape, dtype=bool)
    for s in seeds:
        scale[s.y, s.x] = s.sigma
        mask[s.y, s.x] = True
    return ScaleMap(scale, mask, scheme)


def constant_map(shape: Tuple[int, int], sigma: float) -> ScaleMap:
    return ScaleMap(np.full(shape, float(sigma)), np.zeros(shape, dtype=bool), "constant")


def match_keypoints(img_a: np.ndarray, img_b: np.ndarray, kps_a: Sequence[Keypoint],
                    kps_b: Sequence[Keypoint]) -> List[SparseMatch]:
    """Mutual nearest neighbours by descriptor distance, sorted by ratio."""
    if not kps_a or not kps_b:
        raise ValueError("both keypoint lists must be non-empty")
    da = extract_keypoints(img_a, kps_a)
    db = extract_keypoints(img_b, kps_b)
    d2 = (da ** 2).sum(1)[:, None] + (db ** 2).sum(1)[None, :] - 2 * da @ db.T
    dist = np.sqrt(np.maximum(d2, 0.0))
    nn_ab = np.argmin(dist, axis=1)
    nn_ba = np.argmin(dist, axis=0)
    matches = []
    for i, j in enumerate(nn_ab):
        if nn_ba[j] != i:
            continue
        d1 = dist[i, j]
        if dist.shape[1] > 1:
            second = np.partition(dist[i], 1)[1]
            ratio = d1 / second if second > 0 else (0.0 if d1 == 0 else 1.0)
        else:
            ratio = 1.0
        matches.append(SparseMatch(kps_a[i], kps_b[j], float(min(ratio, 1.0))))
    matches.sort(key=lambda m: m.ratio)
    return matches


def match_seeds(img_a: np.ndarray, img_b: np.ndarray, kps_a: Sequence[Keypoint],
                kps_b: Sequence[Keypoint], keep_fraction: float = KEEP_FRACTION,
                sigma_min: float = SIGMA_MIN, sigma_max: float = SIGMA_MAX):
    """Seeds from the best ``keep_fraction`` of mutual matches, one list per image.

    Returns ``(seeds_a, seeds_b, kept_matches)``.
    """
    matches = match_keypoints(img_a, img_b, kps_a, kps_b)
    if not matches:
        raise NoMatchesError(
            "no mutual keypoint matches; fall back to geometric or image-aware propagation"
        )
    keep = max(1, int(math.floor(keep_fraction * len(matches) + 0.5)))
    kept = matches[:keep]
    shape_a = to_grayscale(img_a).shape
    shape_b = to_grayscale(img_b).shape
    seeds_a = seeds_from_keypoints([m.kp_a for m in kept], shape_a, sigma_min, sigma_max)
    seeds_b = seeds_from_keypoints([m.kp_b for m in kept], shape_b, sigma_min, sigma_max)
    return seeds_a, seeds_b, kept


def propagate_matched(img_a: np.ndarray, img_b: np.ndarray, kps_a: Sequence[Keypoint],
                      kps_b: Sequence[Keypoint], guidance: str = "image",
                      keep_fraction: float = KEEP_FRACTION,
                      sigma_min: float = SIGMA_MIN, sigma_max: float = SIGMA_MAX,
                      tol: float = 1e-6) -> Tuple[ScaleMap, ScaleMap]:
    seeds_a, seeds_b, _ = match_seeds(img_a, img_b, kps_a, kps_b, keep_fraction,
                                      sigma_min, sigma_max)
    map_a = propagate(img_a, seeds_a, guidance, sigma_min, sigma_max, tol)
    map_b = propagate(img_b, seeds_b, guidance, sigma_min, sigma_max, tol)
    return (ScaleMap(map_a.scale, map_a.seed_mask, "match"),
            ScaleMap(map_b.scale, map_b.seed_mask, "match"))
