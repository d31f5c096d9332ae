"""Command-line front end: ``scaleflow <command> ...``.

Options come from three layers: built-in defaults, an optional ``--config``
file of ``key = value`` lines (keys are the long option names with dashes
or underscores), and explicit flags, which win.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import evaluation as ev
from . import pipeline as pl
from .detector import detect_image
from .flow import FlowParams
from .flowio import FloFormatError, read_flo, write_flo, write_pfm
from .image import ImageError, load_image, pad_to, save_png, warp_backward
from .propagation import NoMatchesError, ScaleMap, propagate, propagate_matched, seeds_from_keypoints
from .render import atomic_path, line_chart, scale_map_png, write_text_atomic
from .solver import SolverError

log = logging.getLogger("scaleflow")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3


class InputError(Exception):
    """Bad user input; reported with exit code 2."""


# name -> (type, default, help)
DETECTOR_OPTS = {
    "peak_threshold": (float, pl.DetectorParams.peak_threshold, "DoG peak threshold"),
    "edge_threshold": (float, pl.DetectorParams.edge_threshold, "edge rejection ratio r"),
    "octaves": (int, None, "scale-space octaves (None: as many as fit)"),
    "levels": (int, pl.DetectorParams.levels, "scale-space levels per octave"),
    "sigma0": (float, pl.DetectorParams.sigma0, "base scale of the first octave"),
}
PROPAGATION_OPTS = {
    "keep_fraction": (float, pl.PropagationParams.keep_fraction, "fraction of best matches kept as seeds"),
    "sigma_min": (float, pl.PropagationParams.sigma_min, "lower clamp on propagated scales"),
    "sigma_max": (float, pl.PropagationParams.sigma_max, "upper clamp on propagated scales"),
    "tol": (float, pl.PropagationParams.tol, "relative residual tolerance of the solver"),
    "fallback": (str, pl.PropagationParams.fallback, "method used when match seeding fails: image|geo|dsift|error"),
    "guidance": (str, pl.PropagationParams.guidance, "stencils for match seeds: image|geometric"),
}
FLOW_OPTS = {
    "k": (float, FlowParams.k, "data-term truncation"),
    "nu": (float, FlowParams.nu, "displacement penalty"),
    "alpha": (float, None, "smoothness weight (None: 2*nu)"),
    "d": (float, None, "smoothness truncation (None: 40*alpha)"),
    "flow_levels": (int, FlowParams.levels, "coarse-to-fine pyramid levels"),
    "radius": (int, FlowParams.radius, "search radius per level"),
    "top_radius": (int, None, "search radius on the coarsest level (None: radius)"),
    "iterations": (int, FlowParams.iterations, "maximum message-passing sweeps per level"),
    "pyramid": (str, "pool", "coarse descriptor levels: pool|resample"),
}


def _none_or(tp):
    def conv(text):
        if isinstance(text, str) and text.strip().lower() in ("none", ""):
            return None
        return tp(text)
    conv.__name__ = tp.__name__
    return conv


def _add_opts(parser: argparse.ArgumentParser, opts: Dict, title: str) -> None:
    grp = parser.add_argument_group(title)
    for name, (tp, default, text) in opts.items():
        grp.add_argument("--" + name.replace("_", "-"), dest=name, type=_none_or(tp),
                         default=argparse.SUPPRESS, help=f"{text} (default: {default})")


def read_config(path: str | os.PathLike) -> Dict[str, str]:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    out = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def resolve(args: argparse.Namespace, *tables: Dict) -> Dict[str, object]:
    """Merge defaults, config file and flags, in increasing priority."""
    known = {}
    for t in tables:
        known.update(t)
    values = {name: default for name, (_, default, _) in known.items()}
    if getattr(args, "config", None):
        for key, text in read_config(args.config).items():
            if key not in known:
                raise InputError(f"unknown config key {key!r}")
            try:
                values[key] = _none_or(known[key][0])(text)
            except ValueError as exc:
                raise InputError(f"config key {key}: {exc}") from exc
    for name in known:
        if hasattr(args, name):
            values[name] = getattr(args, name)
    return values


def _detector_params(cfg) -> pl.DetectorParams:
    return pl.DetectorParams(cfg["peak_threshold"], cfg["edge_threshold"], cfg["octaves"],
                             cfg["levels"], cfg["sigma0"])


def _propagation_params(cfg) -> pl.PropagationParams:
    try:
        return pl.PropagationParams(cfg["keep_fraction"], cfg["sigma_min"], cfg["sigma_max"],
                                    cfg["tol"], cfg["fallback"], cfg["guidance"])
    except ValueError as exc:
        raise InputError(str(exc)) from exc


def _flow_params(cfg) -> FlowParams:
    return FlowParams(k=cfg["k"], nu=cfg["nu"], alpha=cfg["alpha"], d=cfg["d"],
                      levels=cfg["flow_levels"], radius=cfg["radius"],
                      top_radius=cfg["top_radius"], iterations=cfg["iterations"])


def _load(path) -> np.ndarray:
    try:
        return load_image(path)
    except ImageError as exc:
        raise InputError(str(exc)) from exc


def _save_scale_map(smap: ScaleMap, pfm_path: Path, png_path: Path) -> None:
    with atomic_path(pfm_path) as tmp:
        write_pfm(tmp, smap.scale)
    img, vmin, vmax = scale_map_png(smap.scale)
    with atomic_path(png_path) as tmp:
        img.save(tmp, format="PNG")
    legend = png_path.with_suffix(".txt")
    write_text_atomic(legend, f"min {vmin:.6f}\nmax {vmax:.6f}\ncolormap jet\nunits pixels\n")


# ------------------------------------------------------------------ commands

def cmd_detect(args) -> int:
    cfg = resolve(args, DETECTOR_OPTS)
    img = _load(args.image)
    dp = _detector_params(cfg)
    kps = detect_image(img, dp.peak_threshold, dp.edge_threshold, dp.octaves, dp.levels, dp.sigma0)
    text = "".join(f"{k.x:.4f} {k.y:.4f} {k.sigma:.4f} {k.response:.6g} {k.orientation:.6f}\n"
                   for k in kps)
    if args.output:
        write_text_atomic(args.output, text)
    else:
        sys.stdout.write(text)
    log.info("%d keypoints", len(kps))
    return EXIT_OK


def cmd_propagate(args) -> int:
    cfg = resolve(args, DETECTOR_OPTS, PROPAGATION_OPTS)
    if args.method == "match" and args.image_b is None:
        raise InputError("--method match needs two images")
    dp = _detector_params(cfg)
    pp = _propagation_params(cfg)
    paths = [Path(args.image)] + ([Path(args.image_b)] if args.image_b else [])
    imgs = [_load(p) for p in paths]
    if args.method == "match":
        kps = [detect_image(i, dp.peak_threshold, dp.edge_threshold, dp.octaves, dp.levels, dp.sigma0)
               for i in imgs]
        if not kps[0] or not kps[1]:
            raise InputError("no keypoints detected in one of the images")
        maps = list(propagate_matched(imgs[0], imgs[1], kps[0], kps[1], pp.guidance,
                                      pp.keep_fraction, pp.sigma_min, pp.sigma_max, pp.tol))
    else:
        scheme = "geometric" if args.method == "geo" else "image"
        maps = []
        for img in imgs:
            kps = detect_image(img, dp.peak_threshold, dp.edge_threshold, dp.octaves, dp.levels,
                               dp.sigma0)
            if not kps:
                raise InputError("no keypoints detected; nothing to propagate")
            seeds = seeds_from_keypoints(kps, img.shape[:2], pp.sigma_min, pp.sigma_max)
            maps.append(propagate(img, seeds, scheme, pp.sigma_min, pp.sigma_max, pp.tol))
    out_dir = Path(args.out) if args.out else None
    for path, smap in zip(paths, maps):
        base = (out_dir or path.parent) / path.stem
        _save_scale_map(smap, base.with_suffix(".pfm"), Path(f"{base}_scales.png"))
        print(f"{base}.pfm  scales {smap.scale.min():.3f}..{smap.scale.max():.3f}")
    return EXIT_OK


def _pad_common(a: np.ndarray, b: np.ndarray):
    shape = (max(a.shape[0], b.shape[0]), max(a.shape[1], b.shape[1]))
    pa, oa = pad_to(a, shape)
    pb, ob = pad_to(b, shape)
    if oa != (0, 0) or ob != (0, 0) or a.shape[:2] != b.shape[:2]:
        log.info("padded to %dx%d; offsets a=%s b=%s", shape[1], shape[0], oa, ob)
    return pa, pb


def cmd_flow(args) -> int:
    cfg = resolve(args, DETECTOR_OPTS, PROPAGATION_OPTS, FLOW_OPTS)
    a = _load(args.image_a)
    b = _load(args.image_b)
    if a.ndim != b.ndim:
        a = np.repeat(a[..., None], 3, axis=2) if a.ndim == 2 else a
        b = np.repeat(b[..., None], 3, axis=2) if b.ndim == 2 else b
    a, b = _pad_common(a, b)
    res = pl.pipeline(a, b, args.method, _flow_params(cfg), _detector_params(cfg),
                      _propagation_params(cfg), cfg["pyramid"])
    out = Path(args.out)
    with atomic_path(out / "flow.flo") as tmp:
        write_flo(tmp, res.flow.u, res.flow.v)
    warped, _ = warp_backward(b, res.flow.u.astype(np.float64), res.flow.v.astype(np.float64))
    with atomic_path(out / "hallucination.png") as tmp:
        save_png(warped, tmp)
    for tag, smap in (("a", res.scales_a), ("b", res.scales_b)):
        _save_scale_map(smap, out / f"scales_{tag}.pfm", out / f"scales_{tag}.png")
    print(f"energy {res.flow.energy:.6f}  flow {res.timings['flow']:.2f}s  "
          f"propagation {res.timings.get('propagate', 0.0):.2f}s")
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        est = read_flo(args.estimate)
        gt = read_flo(args.ground_truth)
    except (OSError, FloFormatError) as exc:
        raise InputError(str(exc)) from exc
    if est[0].shape != gt[0].shape:
        raise InputError(f"flow dimensions differ: {est[0].shape} vs {gt[0].shape}")
    _, st = ev.endpoint_error(est, gt)
    print(f"AE {st.mean_ae:.3f} +- {st.sd_ae:.3f} deg  EE {st.mean_ee:.3f} +- {st.sd_ee:.3f} px  "
          f"({st.valid_count} px)")
    if args.csv:
        path = Path(args.csv)
        head = "" if path.exists() else "estimate,ground_truth,mean_ae,sd_ae,mean_ee,sd_ee,valid_count\n"
        row = (f"{args.estimate},{args.ground_truth},{st.mean_ae:.6f},{st.sd_ae:.6f},"
               f"{st.mean_ee:.6f},{st.sd_ee:.6f},{st.valid_count}\n")
        write_text_atomic(path, head + row, append=True)
    return EXIT_OK


def _parse_floats(text: str, name: str) -> List[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise InputError(f"--{name}: {exc}") from exc


def cmd_bench(args) -> int:
    cfg = resolve(args, DETECTOR_OPTS, PROPAGATION_OPTS, FLOW_OPTS)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    bad = [m for m in methods if m not in pl.METHODS]
    if bad or not methods:
        raise InputError(f"unknown methods {bad}; choose from {','.join(pl.METHODS)}")
    factors = _parse_floats(args.factors, "factors")
    if len(factors) != 2 or min(factors) <= 0:
        raise InputError("--factors needs two positive values")
    try:
        rows = ev.scaled_benchmark(args.dataset, tuple(factors), methods, _flow_params(cfg),
                                   _detector_params(cfg), _propagation_params(cfg),
                                   cfg["pyramid"], args.jobs, args.max_pixels or None)
    except FileNotFoundError as exc:
        raise InputError(str(exc)) from exc
    write_text_atomic(args.csv, ev.bench_csv(rows))
    table = ev.bench_table(rows)
    if args.table:
        write_text_atomic(args.table, table)
    sys.stdout.write(table)
    return EXIT_OK


def cmd_noise(args) -> int:
    cfg = resolve(args, FLOW_OPTS)
    img = _load(args.image)
    fractions = _parse_floats(args.fractions, "fractions")
    if not fractions or any(not 0 <= f <= 1 for f in fractions):
        raise InputError("--fractions must be values in [0, 1]")
    if args.trials < 1:
        raise InputError("--trials must be at least 1")
    rows = ev.noise_study(img, fractions, args.trials, args.seed, _flow_params(cfg))
    write_text_atomic(args.csv, ev.noise_csv(rows))
    plot = args.plot or str(Path(args.csv).with_suffix(".png"))
    chart = line_chart([r.fraction for r in rows],
                       [("EE (px)", [r.mean_ee for r in rows]), ("AE (deg)", [r.mean_ae for r in rows])],
                       title="flow error vs fraction of corrupted scales")
    with atomic_path(plot) as tmp:
        chart.save(tmp, format="PNG")
    for r in rows:
        print(f"{r.fraction:4.2f}  AE {r.mean_ae:.4f} +- {r.se_ae:.4f}  EE {r.mean_ee:.4f} +- {r.se_ee:.4f}")
    return EXIT_OK


# -------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="scaleflow", description="Scale-propagated dense correspondence.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text, formatter_class=fmt)
        p.add_argument("--config", default=None, help="key = value defaults file")
        p.set_defaults(func=fn)
        return p

    p = add("detect", cmd_detect, "Detect DoG keypoints; one 'x y sigma response orientation' line each.")
    p.add_argument("image")
    p.add_argument("-o", "--output", default=None, help="keypoint file (stdout if omitted)")
    _add_opts(p, DETECTOR_OPTS, "detector")

    p = add("propagate", cmd_propagate, "Propagate detector scales into dense scale maps.")
    p.add_argument("image")
    p.add_argument("image_b", nargs="?", default=None)
    p.add_argument("--method", choices=("geo", "image", "match"), default="geo", help="propagation scheme")
    p.add_argument("--out", default=None, help="output directory (next to the image if omitted)")
    _add_opts(p, DETECTOR_OPTS, "detector")
    _add_opts(p, PROPAGATION_OPTS, "propagation")

    p = add("flow", cmd_flow, "Dense flow from image A to image B.")
    p.add_argument("image_a")
    p.add_argument("image_b")
    p.add_argument("--method", choices=pl.METHODS, default="match", help="scale source")
    p.add_argument("--out", default=".", help="output directory")
    _add_opts(p, DETECTOR_OPTS, "detector")
    _add_opts(p, PROPAGATION_OPTS, "propagation")
    _add_opts(p, FLOW_OPTS, "flow")

    p = add("eval", cmd_eval, "Angular and endpoint error of an estimated .flo against ground truth.")
    p.add_argument("estimate")
    p.add_argument("ground_truth")
    p.add_argument("--csv", default=None, help="append a result row to this CSV")

    p = add("bench", cmd_bench, "Scaled-pair benchmark over a Middlebury-format directory.")
    p.add_argument("dataset")
    p.add_argument("--methods", default="dsift,match", help="comma-separated subset of " + ",".join(pl.METHODS))
    p.add_argument("--factors", default="0.7,0.2", help="resize factors of source and target")
    p.add_argument("--max-pixels", type=int, default=500_000, help="working-size budget (0: none)")
    p.add_argument("--jobs", type=int, default=1, help="pairs run in parallel (capped by SCALEFLOW_THREADS)")
    p.add_argument("--csv", default="bench.csv", help="CSV report")
    p.add_argument("--table", default=None, help="also write the text table here")
    _add_opts(p, DETECTOR_OPTS, "detector")
    _add_opts(p, PROPAGATION_OPTS, "propagation")
    _add_opts(p, FLOW_OPTS, "flow")

    p = add("noise", cmd_noise, "Flow error of an image against itself under scale-map noise.")
    p.add_argument("image")
    p.add_argument("--fractions", default=",".join(f"{f:g}" for f in ev.DEFAULT_FRACTIONS),
                   help="comma-separated fractions of corrupted pixels")
    p.add_argument("--trials", type=int, default=5, help="trials per fraction")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--csv", default="noise.csv", help="CSV report")
    p.add_argument("--plot", default=None, help="plot PNG (CSV name with .png if omitted)")
    _add_opts(p, FLOW_OPTS, "flow")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InputError, ImageError, FileNotFoundError, FloFormatError, NoMatchesError) as exc:
        print(f"scaleflow {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ValueError as exc:
        print(f"scaleflow {args.command}: invalid input: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (SolverError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"scaleflow {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
