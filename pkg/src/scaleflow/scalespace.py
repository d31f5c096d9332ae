"""Gaussian scale space and Difference-of-Gaussians pyramid."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from scipy import ndimage

# camera blur assumed already present in every input image
ASSUMED_BLUR = 0.5
DEFAULT_SIGMA0 = 1.6
DEFAULT_LEVELS = 3
MIN_OCTAVE_SIZE = 8


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Sampled 1-D Gaussian truncated at +-ceil(4 sigma), normalised to sum 1."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    radius = int(math.ceil(4.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with reflective boundaries."""
    k = gaussian_kernel(sigma)
    out = ndimage.correlate1d(np.asarray(img, dtype=np.float64), k, axis=0, mode="reflect")
    return ndimage.correlate1d(out, k, axis=1, mode="reflect")


@dataclass(frozen=True)
class ScaleSpace:
    """Per-octave stacks of progressively blurred images.

    ``gaussians[o]`` holds ``levels_per_octave + 3`` images sharing the
    octave's dimensions; image ``s`` of octave ``o`` has blur
    ``sigma0 * 2 ** (o + s / levels_per_octave)`` in base-image pixels.
    """

    octaves: int
    levels_per_octave: int
    sigma0: float
    gaussians: Tuple[Tuple[np.ndarray, ...], ...]
    base_shape: Tuple[int, int]

    def sigma(self, octave: int, level: float) -> float:
        return self.sigma0 * 2.0 ** (octave + level / self.levels_per_octave)

    @property
    def levels(self) -> List[Tuple[int, int, float, np.ndarray]]:
        return [
            (o, s, self.sigma(o, s), g)
            for o, stack in enumerate(self.gaussians)
            for s, g in enumerate(stack)
        ]

    def nearest_level(self, sigma: float) -> Tuple[int, int]:
        """(octave, level) whose blur is closest to ``sigma`` in log scale."""
        best, best_d = (0, 0), math.inf
        for o, s, sig, _ in self.levels:
            d = abs(math.log(sig / sigma))
            if d < best_d:
                best, best_d = (o, s), d
        return best


@dataclass(frozen=True)
class DoGPyramid:
    octaves: int
    levels_per_octave: int
    sigma0: float
    stacks: Tuple[np.ndarray, ...]  # one (layers, h, w) array per octave
    base_shape: Tuple[int, int]

    def sigma(self, octave: int, level: float) -> float:
        return self.sigma0 * 2.0 ** (octave + level / self.levels_per_octave)

    @property
    def layers(self) -> List[Tuple[int, int, float, np.ndarray]]:
        return [
            (o, s, self.sigma(o, s), stack[s])
            for o, stack in enumerate(self.stacks)
            for s in range(stack.shape[0])
        ]


def _octave_shapes(shape: Tuple[int, int], octaves: int) -> List[Tuple[int, int]]:
    shapes = [tuple(shape)]
    for _ in range(octaves - 1):
        h, w = shapes[-1]
        shapes.append(((h + 1) // 2, (w + 1) // 2))
    return shapes


def default_octaves(shape: Tuple[int, int]) -> int:
    return max(1, int(math.floor(math.log2(min(shape) / MIN_OCTAVE_SIZE))) + 1)


def build_scale_space(
    img: np.ndarray,
    octaves: Optional[int] = None,
    levels: int = DEFAULT_LEVELS,
    sigma0: float = DEFAULT_SIGMA0,
) -> ScaleSpace:
    """Blur ``img`` incrementally into ``octaves`` x ``levels + 3`` images.

    The next octave starts from every second pixel of the level at twice the
    octave's base blur.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("scale space needs a grayscale image")
    if levels < 3:
        raise ValueError("need at least 3 levels per octave")
    if octaves is None:
        octaves = default_octaves(img.shape)
    if octaves < 1:
        raise ValueError("need at least one octave")
    last = _octave_shapes(img.shape, octaves)[-1]
    if min(last) < MIN_OCTAVE_SIZE:
        raise ValueError(
            f"image {img.shape} too small for {octaves} octaves "
            f"(last octave would be {last})"
        )

    n_images = levels + 3
    rel = [sigma0 * 2.0 ** (s / levels) for s in range(n_images)]
    increments = [math.sqrt(rel[s] ** 2 - rel[s - 1] ** 2) for s in range(1, n_images)]

    pre = math.sqrt(max(sigma0 ** 2 - ASSUMED_BLUR ** 2, 0.0))
    base = gaussian_blur(img, pre) if pre > 0 else img.copy()
    stacks = []
    for o in range(octaves):
        stack = [base]
        for inc in increments:
            stack.append(gaussian_blur(stack[-1], inc))
        stacks.append(tuple(stack))
        base = stack[levels][::2, ::2]
    return ScaleSpace(octaves, levels, sigma0, tuple(stacks), tuple(img.shape))


def build_dog(ss: ScaleSpace) -> DoGPyramid:
    stacks = []
    for stack in ss.gaussians:
        if len(stack) < 2:
            raise ValueError("need at least two Gaussian levels per octave")
        g = np.stack(stack)
        stacks.append(g[1:] - g[:-1])
    return DoGPyramid(ss.octaves, ss.levels_per_octave, ss.sigma0, tuple(stacks), ss.base_shape)
