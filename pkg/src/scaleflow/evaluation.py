"""Flow error metrics and the experiment harnesses.

Resized-pair ground truth
-------------------------
Source image ``A`` and target ``B`` share a ground-truth flow ``g`` mapping
``P`` in A to ``P + g(P)`` in B. A is resized by ``s_a`` and B by ``s_b``
(pixel-centre aligned, so a resized coordinate ``x'`` corresponds to
``(x' + 0.5) / s - 0.5``), then both are zero-padded to common dimensions
with offsets ``o_a`` and ``o_b``. For a pixel ``p'`` of the resized source::

    P     = (p' + 0.5) / s_a - 0.5
    q'    = (P + g(P) + 0.5) * s_b - 0.5
    g'(p' + o_a) = q' + o_b - (p' + o_a)
                 = s_b g(P) + (s_b - s_a)(p' + 0.5) / s_a + o_b - o_a

``s_a`` and ``s_b`` are the actual per-axis ratios after rounding the output
dimensions, and ``g(P)`` is bilinearly interpolated; pixels whose
interpolation touches unknown flow, and padding pixels, are marked unknown.
"""

from __future__ import annotations

import concurrent.futures
import csv
import io
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import pipeline as pl
from .descriptor import DSIFT_SIGMA, extract_dense_mapped
from .flow import FlowField, FlowParams, estimate_flow, pool_pyramid
from .flowio import UNKNOWN_FLOW, read_flo, unknown_mask
from .image import load_image, pad_to, resize
from .propagation import SIGMA_MAX, SIGMA_MIN

log = logging.getLogger(__name__)

NOISE_STD = 2.0
DEFAULT_FRACTIONS = tuple(round(0.1 * i, 1) for i in range(10))
CSV_HEADER = ["pair", "method", "mean_ae", "sd_ae", "mean_ee", "sd_ee", "prop_sec", "flow_sec"]


@dataclass(frozen=True)
class ErrorStats:
    mean_ae: float
    sd_ae: float
    mean_ee: float
    sd_ee: float
    valid_count: int


def _uv(f) -> Tuple[np.ndarray, np.ndarray]:
    if isinstance(f, FlowField):
        return np.asarray(f.u, np.float64), np.asarray(f.v, np.float64)
    if isinstance(f, tuple):
        return np.asarray(f[0], np.float64), np.asarray(f[1], np.float64)
    arr = np.asarray(f, np.float64)
    return arr[..., 0], arr[..., 1]


def _valid(est, gt):
    ue, ve = _uv(est)
    ug, vg = _uv(gt)
    if ue.shape != ug.shape:
        raise ValueError(f"flow dimensions differ: {ue.shape} vs {ug.shape}")
    valid = ~unknown_mask(ug, vg) & np.isfinite(ue) & np.isfinite(ve)
    return ue, ve, ug, vg, valid


def _stats(per_pixel: np.ndarray, other: np.ndarray, valid: np.ndarray, ae_first: bool) -> ErrorStats:
    a = per_pixel[valid]
    b = other[valid]
    n = int(valid.sum())
    if n == 0:
        return ErrorStats(0.0, 0.0, 0.0, 0.0, 0)
    ae, ee = (a, b) if ae_first else (b, a)
    return ErrorStats(float(ae.mean()), float(ae.std()), float(ee.mean()), float(ee.std()), n)


def _ae(ue, ve, ug, vg):
    num = ue * ug + ve * vg + 1.0
    den = np.sqrt(ue ** 2 + ve ** 2 + 1.0) * np.sqrt(ug ** 2 + vg ** 2 + 1.0)
    return np.degrees(np.arccos(np.clip(num / den, -1.0, 1.0)))


def _ee(ue, ve, ug, vg):
    return np.hypot(ue - ug, ve - vg)


def angular_error(est, gt) -> Tuple[np.ndarray, ErrorStats]:
    """Per-pixel angle (degrees) between ``(u, v, 1)`` vectors; nan where gt is unknown."""
    ue, ve, ug, vg, valid = _valid(est, gt)
    with np.errstate(invalid="ignore", over="ignore"):
        ae = np.where(valid, _ae(ue, ve, ug, vg), np.nan)
        ee = np.where(valid, _ee(ue, ve, ug, vg), np.nan)
    return ae, _stats(ae, ee, valid, True)


def endpoint_error(est, gt) -> Tuple[np.ndarray, ErrorStats]:
    """Per-pixel Euclidean distance between flow vectors; nan where gt is unknown."""
    ue, ve, ug, vg, valid = _valid(est, gt)
    with np.errstate(invalid="ignore", over="ignore"):
        ae = np.where(valid, _ae(ue, ve, ug, vg), np.nan)
        ee = np.where(valid, _ee(ue, ve, ug, vg), np.nan)
    return ee, _stats(ee, ae, valid, False)


def flow_errors(est, gt) -> ErrorStats:
    return endpoint_error(est, gt)[1]


# ---------------------------------------------------------------- noise study

@dataclass(frozen=True)
class NoiseRow:
    fraction: float
    mean_ae: float
    se_ae: float
    mean_ee: float
    se_ee: float


def noise_study(img: np.ndarray, noise_fractions: Sequence[float] = DEFAULT_FRACTIONS,
                trials: int = 5, rng_seed: int = 0, params: FlowParams = FlowParams(),
                noise_std: float = NOISE_STD) -> List[NoiseRow]:
    """Flow error of an image against itself when the target scales are corrupted.

    Both copies start from the constant dense-SIFT scale map. In each trial a
    random subset of the target map's pixels gets Gaussian noise added to its
    scale (clamped to the propagation bounds); the flow is scored against the
    zero ground truth. SE is the sample SD over trials divided by sqrt(trials).
    """
    if trials < 1:
        raise ValueError("trials must be at least 1")
    fractions = [float(f) for f in noise_fractions]
    if any(not 0.0 <= f <= 1.0 for f in fractions):
        raise ValueError("noise fractions must lie in [0, 1]")
    rng = np.random.default_rng(rng_seed)
    shape = img.shape[:2]
    n_pix = shape[0] * shape[1]
    clean = np.full(shape, DSIFT_SIGMA)
    src = pool_pyramid(extract_dense_mapped(img, clean), params.levels)
    zero = np.zeros(shape + (2,))
    rows = []
    for frac in fractions:
        aes, ees = [], []
        for _ in range(trials):
            noisy = clean.copy().ravel()
            count = int(math.floor(frac * n_pix + 0.5))
            idx = rng.choice(n_pix, size=count, replace=False)
            noisy[idx] += rng.normal(0.0, noise_std, size=count)
            noisy = np.clip(noisy, SIGMA_MIN, SIGMA_MAX).reshape(shape)
            dst = pool_pyramid(extract_dense_mapped(img, noisy), params.levels)
            flow = estimate_flow(src, dst, params)
            _, st = endpoint_error(flow, zero)
            aes.append(st.mean_ae)
            ees.append(st.mean_ee)
        se = 1.0 / math.sqrt(trials)
        sd = (lambda x: float(np.std(x, ddof=1)) if len(x) > 1 else 0.0)
        rows.append(NoiseRow(frac, float(np.mean(aes)), sd(aes) * se,
                             float(np.mean(ees)), sd(ees) * se))
        log.info("noise fraction %.2f: EE %.4f", frac, rows[-1].mean_ee)
    return rows


def noise_csv(rows: Sequence[NoiseRow]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["fraction", "mean_ae", "se_ae", "mean_ee", "se_ee"])
    for r in rows:
        wr.writerow([f"{r.fraction:g}", f"{r.mean_ae:.6f}", f"{r.se_ae:.6f}",
                     f"{r.mean_ee:.6f}", f"{r.se_ee:.6f}"])
    return buf.getvalue()


# ------------------------------------------------------ scaled-pair benchmark

@dataclass(frozen=True)
class PairPaths:
    name: str
    frame_a: Path
    frame_b: Path
    gt: Path


_FRAME_NAMES = (("frame10.png", "frame11.png"), ("frame_0010.png", "frame_0011.png"),
                ("im0.png", "im1.png"))


def discover_pairs(dataset_dir: str | os.PathLike) -> List[PairPaths]:
    """Find Middlebury-format pairs.

    Accepted layouts: ``<dir>/<name>/{frame10,frame11}.png`` with
    ``flow10.flo`` beside them, or the official split into
    ``other-data/<name>/`` and ``other-gt-flow/<name>/flow10.flo``.
    """
    root = Path(dataset_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} does not exist")
    data_root = root / "other-data" if (root / "other-data").is_dir() else root
    gt_root = root / "other-gt-flow" if (root / "other-gt-flow").is_dir() else None
    pairs = []
    candidates = [data_root] + sorted(p for p in data_root.iterdir() if p.is_dir())
    for d in candidates:
        for fa, fb in _FRAME_NAMES:
            a, b = d / fa, d / fb
            if not (a.is_file() and b.is_file()):
                continue
            gdir = gt_root / d.name if gt_root is not None else d
            gt = gdir / "flow10.flo"
            if not gt.is_file():
                raise FileNotFoundError(f"pair {d.name}: missing ground truth {gt}")
            pairs.append(PairPaths(d.name, a, b, gt))
            break
    if not pairs:
        raise FileNotFoundError(f"no Middlebury-format pairs found under {root}")
    return pairs


def _interp_flow(u, v, ys, xs):
    """Bilinear flow at (ys, xs); nan where any contributing sample is unknown."""
    h, w = u.shape
    bad = unknown_mask(u, v)
    uu = np.where(bad, np.nan, u.astype(np.float64))
    vv = np.where(bad, np.nan, v.astype(np.float64))
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.minimum(np.floor(ys).astype(int), h - 2) if h > 1 else np.zeros_like(ys, dtype=int)
    x0 = np.minimum(np.floor(xs).astype(int), w - 2) if w > 1 else np.zeros_like(xs, dtype=int)
    fy = ys - y0
    fx = xs - x0
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)

    def lerp(a):
        top = a[y0, x0] * (1 - fx) + a[y0, x1] * fx
        bot = a[y1, x0] * (1 - fx) + a[y1, x1] * fx
        return top * (1 - fy) + bot * fy

    with np.errstate(invalid="ignore"):
        return lerp(uu), lerp(vv)


def compose_ground_truth(u, v, shape_a: Tuple[int, int], shape_b: Tuple[int, int],
                         canvas: Tuple[int, int], offset_a: Tuple[int, int],
                         offset_b: Tuple[int, int]) -> Tuple[np.ndarray, np.ndarray]:
    """Ground truth for the resized, padded pair (see module docstring).

    ``shape_a``/``shape_b`` are the resized image shapes, ``canvas`` the
    padded shape and offsets are ``(x, y)``. Unknown pixels carry
    ``UNKNOWN_FLOW``.
    """
    H, W = u.shape
    ha, wa = shape_a
    hb, wb = shape_b
    sax, say = wa / W, ha / H
    sbx, sby = wb / W, hb / H
    py, px = np.mgrid[0:ha, 0:wa].astype(np.float64)
    P_x = (px + 0.5) / sax - 0.5
    P_y = (py + 0.5) / say - 0.5
    gu, gv = _interp_flow(u, v, P_y, P_x)
    out_u = sbx * gu + (sbx - sax) * (px + 0.5) / sax + offset_b[0] - offset_a[0]
    out_v = sby * gv + (sby - say) * (py + 0.5) / say + offset_b[1] - offset_a[1]
    full_u = np.full(canvas, UNKNOWN_FLOW)
    full_v = np.full(canvas, UNKNOWN_FLOW)
    ox, oy = offset_a
    good = np.isfinite(out_u) & np.isfinite(out_v)
    full_u[oy:oy + ha, ox:ox + wa] = np.where(good, out_u, UNKNOWN_FLOW)
    full_v[oy:oy + ha, ox:ox + wa] = np.where(good, out_v, UNKNOWN_FLOW)
    return full_u, full_v


@dataclass(frozen=True)
class ScaledPair:
    img_a: np.ndarray
    img_b: np.ndarray
    gt_u: np.ndarray
    gt_v: np.ndarray
    offset_a: Tuple[int, int]
    offset_b: Tuple[int, int]


def make_scaled_pair(img_a: np.ndarray, img_b: np.ndarray, gt_u: np.ndarray, gt_v: np.ndarray,
                     factors: Tuple[float, float] = (0.7, 0.2),
                     max_pixels: Optional[int] = None) -> ScaledPair:
    """Resize source by ``factors[0]`` and target by ``factors[1]``, pad both centred.

    ``max_pixels`` first shrinks both originals (and the flow) uniformly so the
    padded canvas stays within that budget.
    """
    if img_a.shape[:2] != img_b.shape[:2] or gt_u.shape != img_a.shape[:2]:
        raise ValueError("frames and ground truth must share dimensions")
    fa, fb = factors
    if max_pixels is not None:
        h, w = img_a.shape[:2]
        big = max(fa, fb)
        pre = min(1.0, math.sqrt(max_pixels / (h * w * big * big)))
        if pre < 1.0:
            fa *= pre
            fb *= pre
    ra = resize(img_a, fa)
    rb = resize(img_b, fb)
    canvas = (max(ra.shape[0], rb.shape[0]), max(ra.shape[1], rb.shape[1]))
    pa, off_a = pad_to(ra, canvas)
    pb, off_b = pad_to(rb, canvas)
    gu, gv = compose_ground_truth(gt_u, gt_v, ra.shape[:2], rb.shape[:2], canvas, off_a, off_b)
    return ScaledPair(pa, pb, gu, gv, off_a, off_b)


@dataclass(frozen=True)
class BenchRow:
    pair: str
    method: str
    mean_ae: float
    sd_ae: float
    mean_ee: float
    sd_ee: float
    prop_sec: float
    flow_sec: float


def _bench_pair(paths: PairPaths, factors, methods, params, dp, pp, pyramid, max_pixels):
    img_a = load_image(paths.frame_a)
    img_b = load_image(paths.frame_b)
    u, v = read_flo(paths.gt)
    sp = make_scaled_pair(img_a, img_b, u, v, factors, max_pixels)
    rows = []
    for method in methods:
        res = pl.pipeline(sp.img_a, sp.img_b, method, params, dp, pp, pyramid)
        _, st = endpoint_error(res.flow, (sp.gt_u, sp.gt_v))
        rows.append(BenchRow(paths.name, method, st.mean_ae, st.sd_ae, st.mean_ee, st.sd_ee,
                             res.timings.get("propagate", 0.0), res.timings["flow"]))
        log.info("%s/%s: AE %.2f EE %.2f", paths.name, method, st.mean_ae, st.mean_ee)
    return rows


def thread_cap(requested: Optional[int] = None) -> int:
    """Worker count, capped by the SCALEFLOW_THREADS environment variable."""
    n = requested if requested is not None else (os.cpu_count() or 1)
    env = os.environ.get("SCALEFLOW_THREADS")
    if env:
        try:
            n = min(n, max(1, int(env)))
        except ValueError:
            log.warning("ignoring non-integer SCALEFLOW_THREADS=%r", env)
    return max(1, n)


def scaled_benchmark(dataset_dir: str | os.PathLike, factors: Tuple[float, float] = (0.7, 0.2),
                     methods: Sequence[str] = ("dsift", "match"),
                     params: FlowParams = FlowParams(),
                     dp: pl.DetectorParams = pl.DetectorParams(),
                     pp: pl.PropagationParams = pl.PropagationParams(),
                     pyramid: str = "pool", jobs: int = 1,
                     max_pixels: Optional[int] = 500_000) -> List[BenchRow]:
    """Every pair of ``dataset_dir`` under every method, pairs run as parallel jobs."""
    for m in methods:
        if m not in pl.METHODS:
            raise ValueError(f"unknown method {m!r}")
    pairs = discover_pairs(dataset_dir)
    args = (factors, tuple(methods), params, dp, pp, pyramid, max_pixels)
    jobs = thread_cap(jobs)
    if jobs <= 1 or len(pairs) == 1:
        results = [_bench_pair(p, *args) for p in pairs]
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=min(jobs, len(pairs))) as ex:
            results = list(ex.map(_bench_pair, pairs, *[[a] * len(pairs) for a in args]))
    return [row for rows in results for row in rows]


def bench_csv(rows: Sequence[BenchRow]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(CSV_HEADER)
    for r in rows:
        wr.writerow([r.pair, r.method] + [f"{getattr(r, k):.6f}" for k in CSV_HEADER[2:]])
    return buf.getvalue()


def bench_table(rows: Sequence[BenchRow]) -> str:
    """Pairs as rows, methods as columns, cells ``AE +- SD / EE +- SD``."""
    methods = list(dict.fromkeys(r.method for r in rows))
    pairs = list(dict.fromkeys(r.pair for r in rows))
    cell: Dict[Tuple[str, str], BenchRow] = {(r.pair, r.method): r for r in rows}
    width = max([len(p) for p in pairs] + [4])
    col = 29
    lines = ["".ljust(width) + "".join(f" | {m:^{col}}" for m in methods)]
    lines.append("".ljust(width) + "".join(f" | {'AE':^14}{'EE':^15}" for _ in methods))
    lines.append("-" * len(lines[0]))
    for p in pairs:
        parts = [p.ljust(width)]
        for m in methods:
            r = cell.get((p, m))
            if r is None:
                parts.append(f" | {'-':^{col}}")
            else:
                parts.append(f" | {r.mean_ae:6.2f}±{r.sd_ae:<6.2f} {r.mean_ee:7.2f}±{r.sd_ee:<6.2f}")
        lines.append("".join(parts))
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------ runtime report

@dataclass(frozen=True)
class RuntimeRow:
    propagation_seconds: float
    flow_seconds: float
    ratio: float


def runtime_report(img_a: np.ndarray, img_b: np.ndarray, method: str = "match",
                   params: FlowParams = FlowParams(),
                   dp: pl.DetectorParams = pl.DetectorParams(),
                   pp: pl.PropagationParams = pl.PropagationParams(),
                   pyramid: str = "pool") -> RuntimeRow:
    """Wall-clock seconds of scale propagation versus flow estimation."""
    res = pl.pipeline(img_a, img_b, method, params, dp, pp, pyramid)
    prop_t = res.timings.get("propagate", 0.0)
    flow_t = res.timings["flow"]
    return RuntimeRow(prop_t, flow_t, prop_t / flow_t if flow_t > 0 else math.inf)
