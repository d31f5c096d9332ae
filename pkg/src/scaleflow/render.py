"""Small raster renderings: colour-coded scale maps and line charts."""

from __future__ import annotations

import contextlib
import os
import tempfile
from pathlib import Path
from typing import Iterator, Sequence, Tuple

import numpy as np
from PIL import Image, ImageDraw

# piecewise-linear "jet": dark blue, blue, cyan, yellow, red, dark red
_JET = np.array([
    [0.0, 0.0, 0.0, 0.5],
    [0.125, 0.0, 0.0, 1.0],
    [0.375, 0.0, 1.0, 1.0],
    [0.625, 1.0, 1.0, 0.0],
    [0.875, 1.0, 0.0, 0.0],
    [1.0, 0.5, 0.0, 0.0],
])


@contextlib.contextmanager
def atomic_path(path: str | os.PathLike) -> Iterator[Path]:
    """Yield a temporary sibling path that replaces ``path`` on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=path.suffix, dir=path.parent)
    os.close(fd)
    tmp = Path(tmp)
    try:
        yield tmp
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def write_text_atomic(path: str | os.PathLike, text: str, append: bool = False) -> None:
    path = Path(path)
    if append and path.exists():
        text = path.read_text() + text
    with atomic_path(path) as tmp:
        tmp.write_text(text)


def colorize(values: np.ndarray, vmin: float, vmax: float) -> np.ndarray:
    """Map values to uint8 RGB with the jet colormap over [vmin, vmax]."""
    span = vmax - vmin
    t = np.zeros_like(values, dtype=np.float64) if span <= 0 else (values - vmin) / span
    t = np.clip(t, 0.0, 1.0)
    rgb = np.stack([np.interp(t, _JET[:, 0], _JET[:, c]) for c in (1, 2, 3)], axis=-1)
    return np.round(rgb * 255).astype(np.uint8)


def scale_map_png(scale: np.ndarray) -> Tuple[Image.Image, float, float]:
    vmin, vmax = float(np.min(scale)), float(np.max(scale))
    return Image.fromarray(colorize(scale, vmin, vmax)), vmin, vmax


def line_chart(xs: Sequence[float], series: Sequence[Tuple[str, Sequence[float]]],
               size: Tuple[int, int] = (480, 320), title: str = "") -> Image.Image:
    """Plain line chart with axes, tick labels and a legend."""
    w, h = size
    left, right, top, bottom = 56, 16, 28, 36
    img = Image.new("RGB", size, "white")
    dr = ImageDraw.Draw(img)
    xs = np.asarray(xs, dtype=np.float64)
    ally = np.concatenate([np.asarray(s, dtype=np.float64) for _, s in series]) if series else np.zeros(1)
    ally = ally[np.isfinite(ally)]
    y0 = 0.0
    y1 = float(ally.max()) if ally.size and ally.max() > 0 else 1.0
    x0, x1 = (float(xs.min()), float(xs.max())) if xs.size else (0.0, 1.0)
    if x1 <= x0:
        x1 = x0 + 1.0

    def px(x, y):
        return (left + (x - x0) / (x1 - x0) * (w - left - right),
                h - bottom - (y - y0) / (y1 - y0) * (h - top - bottom))

    dr.line([px(x0, y0), px(x1, y0)], fill="black")
    dr.line([px(x0, y0), px(x0, y1)], fill="black")
    for t in np.linspace(y0, y1, 5):
        x, y = px(x0, t)
        dr.line([(x - 4, y), (x, y)], fill="black")
        dr.text((4, y - 6), f"{t:.3g}", fill="black")
    for t in xs:
        x, y = px(t, y0)
        dr.line([(x, y), (x, y + 4)], fill="black")
        dr.text((x - 8, y + 8), f"{t:g}", fill="black")
    colours = ["#1f5fbf", "#d04020", "#208040", "#8040a0"]
    for i, (name, ys) in enumerate(series):
        c = colours[i % len(colours)]
        pts = [px(x, y) for x, y in zip(xs, ys) if np.isfinite(y)]
        if len(pts) > 1:
            dr.line(pts, fill=c, width=2)
        for p in pts:
            dr.ellipse([p[0] - 3, p[1] - 3, p[0] + 3, p[1] + 3], outline=c)
        dr.text((w - right - 90, top + 14 * i), name, fill=c)
    if title:
        dr.text((left, 8), title, fill="black")
    return img
