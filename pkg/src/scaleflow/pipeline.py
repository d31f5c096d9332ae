"""End-to-end correspondence: detect, propagate scales, describe, match."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from . import propagation as prop
from .descriptor import DSIFT_SIGMA, extract_dense_mapped
from .detector import DEFAULT_EDGE_THRESHOLD, DEFAULT_PEAK_THRESHOLD, detect_image
from .flow import FlowField, FlowParams, estimate_flow, pool_pyramid
from .image import resize_to, to_grayscale

log = logging.getLogger(__name__)

METHODS = ("dsift", "geo", "image", "match")
PYRAMID_MODES = ("pool", "resample")
FALLBACKS = ("image", "geo", "dsift", "error")


@dataclass(frozen=True)
class DetectorParams:
    peak_threshold: float = DEFAULT_PEAK_THRESHOLD
    edge_threshold: float = DEFAULT_EDGE_THRESHOLD
    octaves: Optional[int] = None
    levels: int = 3
    sigma0: float = 1.6


@dataclass(frozen=True)
class PropagationParams:
    keep_fraction: float = prop.KEEP_FRACTION
    sigma_min: float = prop.SIGMA_MIN
    sigma_max: float = prop.SIGMA_MAX
    tol: float = 1e-6
    fallback: str = "image"  # used by "match" when no mutual matches exist
    guidance: str = "image"  # stencils for match seeds: "image" or "geometric"

    def __post_init__(self):
        if self.guidance not in prop.SCHEMES:
            raise ValueError(f"guidance must be one of {prop.SCHEMES}")
        if self.fallback not in FALLBACKS:
            raise ValueError(f"fallback must be one of {FALLBACKS}")
        if not 0 < self.keep_fraction <= 1:
            raise ValueError("keep_fraction must lie in (0, 1]")
        if not 0 < self.sigma_min <= self.sigma_max:
            raise ValueError("need 0 < sigma_min <= sigma_max")


@dataclass
class PipelineResult:
    flow: FlowField
    scales_a: prop.ScaleMap
    scales_b: prop.ScaleMap
    timings: dict = field(default_factory=dict)


def _detect(img, dp: DetectorParams):
    return detect_image(img, dp.peak_threshold, dp.edge_threshold, dp.octaves, dp.levels,
                        dp.sigma0)


def _seeds(img, dp, pp):
    kps = _detect(img, dp)
    if not kps:
        return None
    return prop.seeds_from_keypoints(kps, to_grayscale(img).shape, pp.sigma_min, pp.sigma_max)


def _single(img, scheme, dp, pp, timings) -> prop.ScaleMap:
    """Propagate one image's own detector scales; constant map without keypoints."""
    shape = to_grayscale(img).shape
    t0 = time.perf_counter()
    seeds = _seeds(img, dp, pp)
    timings["detect"] = timings.get("detect", 0.0) + time.perf_counter() - t0
    if seeds is None:
        log.warning("no keypoints detected; using the constant scale %.3f", DSIFT_SIGMA)
        return prop.constant_map(shape, DSIFT_SIGMA)
    t0 = time.perf_counter()
    smap = prop.propagate(img, seeds, scheme, pp.sigma_min, pp.sigma_max, pp.tol)
    timings["propagate"] = timings.get("propagate", 0.0) + time.perf_counter() - t0
    return smap


def scale_maps(img_a: np.ndarray, img_b: np.ndarray, method: str,
               dp: DetectorParams = DetectorParams(),
               pp: PropagationParams = PropagationParams(),
               timings: Optional[dict] = None) -> Tuple[prop.ScaleMap, prop.ScaleMap]:
    """Scale maps for both images under one of ``METHODS``.

    ``timings`` (if given) accumulates ``detect`` and ``propagate`` seconds;
    the latter covers stencil construction and the sparse solve only.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    timings = {} if timings is None else timings
    timings.setdefault("detect", 0.0)
    timings.setdefault("propagate", 0.0)
    if method == "dsift":
        return (prop.constant_map(to_grayscale(img_a).shape, DSIFT_SIGMA),
                prop.constant_map(to_grayscale(img_b).shape, DSIFT_SIGMA))
    if method in ("geo", "image"):
        scheme = "geometric" if method == "geo" else "image"
        return _single(img_a, scheme, dp, pp, timings), _single(img_b, scheme, dp, pp, timings)

    t0 = time.perf_counter()
    kps_a = _detect(img_a, dp)
    kps_b = _detect(img_b, dp)
    try:
        if not kps_a or not kps_b:
            raise prop.NoMatchesError("no keypoints in one of the images")
        seeds_a, seeds_b, _ = prop.match_seeds(img_a, img_b, kps_a, kps_b, pp.keep_fraction,
                                               pp.sigma_min, pp.sigma_max)
    except prop.NoMatchesError:
        timings["detect"] += time.perf_counter() - t0
        if pp.fallback == "error":
            raise
        log.warning("match-aware seeding failed; falling back to %s", pp.fallback)
        fallback = "geo" if pp.fallback == "geo" else pp.fallback
        return scale_maps(img_a, img_b, fallback, dp, pp, timings)
    timings["detect"] += time.perf_counter() - t0
    t0 = time.perf_counter()
    map_a = prop.propagate(img_a, seeds_a, pp.guidance, pp.sigma_min, pp.sigma_max, pp.tol)
    map_b = prop.propagate(img_b, seeds_b, pp.guidance, pp.sigma_min, pp.sigma_max, pp.tol)
    timings["propagate"] += time.perf_counter() - t0
    return (prop.ScaleMap(map_a.scale, map_a.seed_mask, "match"),
            prop.ScaleMap(map_b.scale, map_b.seed_mask, "match"))


def pyramid_shapes(shape: Tuple[int, int], levels: int) -> List[Tuple[int, int]]:
    """Level shapes matching ``pool_pyramid``'s 2x decimation."""
    shapes = [tuple(shape)]
    for _ in range(levels - 1):
        h, w = shapes[-1]
        shapes.append(((h + 1) // 2, (w + 1) // 2))
    return shapes


def descriptor_pyramid(img: np.ndarray, smap, levels: int, mode: str = "pool") -> List[np.ndarray]:
    """Descriptor fields for every flow level, finest first.

    ``pool`` smooths and decimates the finest field. ``resample`` extracts
    each level afresh from a downsampled image with scales divided by the
    actual per-level resize factor.
    """
    if mode not in PYRAMID_MODES:
        raise ValueError(f"unknown pyramid mode {mode!r}")
    scales = np.asarray(getattr(smap, "scale", smap), dtype=np.float64)
    gray = to_grayscale(img)
    finest = extract_dense_mapped(gray, scales).descriptors
    if mode == "pool" or levels == 1:
        return pool_pyramid(finest, levels)
    out = [finest]
    h0, w0 = gray.shape
    for shape in pyramid_shapes(gray.shape, levels)[1:]:
        factor = math.sqrt((shape[0] / h0) * (shape[1] / w0))
        small = resize_to(gray, shape)
        s = resize_to(scales, shape, antialias=False) * factor
        out.append(extract_dense_mapped(small, np.maximum(s, 1e-3)).descriptors)
    return out


def pipeline(img_a: np.ndarray, img_b: np.ndarray, method: str = "match",
             params: FlowParams = FlowParams(),
             dp: DetectorParams = DetectorParams(),
             pp: PropagationParams = PropagationParams(),
             pyramid: str = "pool") -> PipelineResult:
    """Dense flow from ``img_a`` to ``img_b``; both images must share dimensions."""
    sa = to_grayscale(img_a).shape
    sb = to_grayscale(img_b).shape
    if sa != sb:
        raise ValueError(f"images differ in size: {sa} vs {sb}; pad them to common dimensions")
    timings: dict = {}
    map_a, map_b = scale_maps(img_a, img_b, method, dp, pp, timings)
    t0 = time.perf_counter()
    pa = descriptor_pyramid(img_a, map_a, params.levels, pyramid)
    pb = descriptor_pyramid(img_b, map_b, params.levels, pyramid)
    timings["describe"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    flow = estimate_flow(pa, pb, params)
    timings["flow"] = time.perf_counter() - t0
    return PipelineResult(flow, map_a, map_b, timings)
