"""Command-line entry point: ``bevkit <subcommand> ...``.

Relative paths resolve against ``--data-root`` (default: the
``BEVKIT_DATA_ROOT`` environment variable, else the working directory).
Pipeline settings come from flags, then ``--set key=value`` pairs, then a
``--config`` file, each overriding the previous.
"""

from __future__ import annotations

import argparse
import functools
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import config as _config
from .bev_encoder import encode
from .box_recovery import recover_boxes
from .errors import BevKitError, FrameSetMismatch
from .evaluator import (
    evaluate,
    format_table,
    plot_pr_curves,
    read_curves_csv,
    report_curves,
    write_csv,
    write_curves_csv,
)
from .geometry import ScoredBox, nms_rotated
from .kitti_io import Calibration
from .net.model import (
    BASELINE_HEAD,
    FULL_HEAD,
    BevDetector,
    init_weights,
    parameter_count,
)
from .net.weights_io import save_weights
from .pipeline import (
    PipelineConfig,
    augment_stage,
    build_detector,
    encode_stage,
    frame_ids,
    infer_stage,
    recover_stage,
    run_frames,
    write_summary,
)

log = logging.getLogger("bevkit")

DATA_ROOT_ENV = "BEVKIT_DATA_ROOT"
EXIT_FRAME_FAILURES = 1
EXIT_USAGE = 2
EXIT_FRAME_SET = 3


def _resolve(args, path):
    if path is None:
        return None
    p = Path(path)
    return p if p.is_absolute() else Path(args.data_root) / p


def pipeline_config(args) -> PipelineConfig:
    pairs: dict[str, str] = {}
    if getattr(args, "c_base", None) is not None:
        pairs["net.c_base"] = str(args.c_base)
    if getattr(args, "head", None) is not None:
        pairs["net.head_levels"] = ",".join(FULL_HEAD if args.head == "full" else BASELINE_HEAD)
    if getattr(args, "multi_offset", False):
        pairs["multi_offset"] = "true"
    if getattr(args, "nms_iou", None) is not None:
        pairs["nms_iou"] = str(args.nms_iou)
    if getattr(args, "seed", None) is not None and args.func is cmd_augment:
        pairs["augment.rng_seed"] = str(args.seed)
    if getattr(args, "dz_max", None) is not None:
        pairs["augment.dz_range"] = f"{-args.dz_max!r},{args.dz_max!r}"
    if getattr(args, "sigma", None) is not None:
        pairs["augment.sigma"] = repr(args.sigma)
    if getattr(args, "mode", None) is not None:
        pairs["eval.mode"] = args.mode
    if getattr(args, "neighbor_ignore", False):
        pairs["eval.neighbor_ignore"] = "true"
    for item in args.set or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"--set expects key=value, got {item!r}")
        pairs[key.strip()] = value.strip()
    if args.config:
        pairs.update(_config.read_pairs(_resolve(args, args.config).read_text()))
    return _config.apply_pairs(PipelineConfig(), pairs)


def _finish(result, out_dir) -> int:
    write_summary(result, out_dir)
    n_ok, n_bad = len(result.frames), len(result.failed)
    print(f"{result.command}: {n_ok} frame(s) ok, {n_bad} failed")
    return 0 if result.ok else EXIT_FRAME_FAILURES


# -- subcommands ---------------------------------------------------------------

def cmd_encode(args) -> int:
    cfg = pipeline_config(args)
    src, out = _resolve(args, args.input), _resolve(args, args.output)
    out.mkdir(parents=True, exist_ok=True)
    res = run_frames("encode", encode_stage, frame_ids(src, ".bin"), (src, out, cfg), args.workers)
    return _finish(res, out)


def cmd_augment(args) -> int:
    cfg = pipeline_config(args)
    src, out = _resolve(args, args.input), _resolve(args, args.output)
    out.mkdir(parents=True, exist_ok=True)
    res = run_frames("augment", augment_stage, frame_ids(src, ".bin"), (src, out, cfg, args.side_by_side),
                     args.workers)
    return _finish(res, out)


def cmd_init_weights(args) -> int:
    cfg = pipeline_config(args)
    out = _resolve(args, args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_weights(out, init_weights(cfg.net, args.seed))
    print(f"wrote {parameter_count(cfg.net)} parameters to {out}")
    return 0


def cmd_infer(args) -> int:
    cfg = pipeline_config(args)
    velo = _resolve(args, args.velodyne)
    cache = _resolve(args, args.cache)
    calib = _resolve(args, args.calib)
    out = _resolve(args, args.output)
    if velo is None and cache is None:
        raise ValueError("infer needs --velodyne or --cache")
    if cfg.multi_offset and velo is None:
        raise ValueError("multi-offset inference re-encodes the scan and needs --velodyne")
    if (args.weights is None) == (args.random_weights is None):
        raise ValueError("give exactly one of --weights and --random-weights")
    # build once up front so weight errors fail fast instead of per frame
    factory = functools.partial(build_detector, cfg, _resolve(args, args.weights), args.random_weights)
    factory()
    frames = frame_ids(velo, ".bin") if velo is not None else frame_ids(cache, ".bev")
    (out / "bev").mkdir(parents=True, exist_ok=True)
    if velo is not None:
        (out / "label_2").mkdir(parents=True, exist_ok=True)
    res = run_frames("infer", infer_stage, frames, (velo, cache, calib, out, cfg), args.workers, factory)
    return _finish(res, out)


def cmd_recover(args) -> int:
    cfg = pipeline_config(args)
    bev, velo = _resolve(args, args.detections), _resolve(args, args.velodyne)
    calib, out = _resolve(args, args.calib), _resolve(args, args.output)
    out.mkdir(parents=True, exist_ok=True)
    res = run_frames("recover", recover_stage, frame_ids(bev, ".txt"), (bev, velo, calib, out, cfg), args.workers)
    return _finish(res, out)


def cmd_eval(args) -> int:
    cfg = pipeline_config(args)
    det, gt, out = _resolve(args, args.detections), _resolve(args, args.labels), _resolve(args, args.output)
    try:
        report = evaluate(det, gt, cfg.eval, with_bands=not args.no_bands)
    except FrameSetMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FRAME_SET
    table = format_table(report)
    print(table, end="")
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        tag = report.mode
        (out / f"ap_{tag}.txt").write_text(table)
        write_csv(report, out / f"ap_{tag}.csv")
        write_curves_csv(report, out / f"pr_{tag}.csv")
        if not args.no_plots:
            plot_pr_curves(report_curves(report), out / f"plots_{tag}")
    return 0


def cmd_plot_pr(args) -> int:
    curves = read_curves_csv(_resolve(args, args.curves))
    written = plot_pr_curves(curves, _resolve(args, args.output))
    print(f"wrote {len(written)} plot(s)")
    return 0


def cmd_forward_check(args) -> int:
    """Run the structural checks of the network on a small synthetic input."""
    from .net import check_structure

    cfg = pipeline_config(args)
    failures = 0
    for name, ok, detail in check_structure(cfg.net, args.size, args.seed):
        failures += not ok
        print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    print(f"parameters: {parameter_count(cfg.net)}")
    return 0 if failures == 0 else EXIT_FRAME_FAILURES


def _synthetic_cloud(n: int, seed: int, grid) -> np.ndarray:
    rng = np.random.default_rng(seed)
    (x0, x1), (y0, y1) = grid.x_range, grid.y_range
    return np.column_stack([
        rng.uniform(x0, x1, n), rng.uniform(y0, y1, n), rng.uniform(-2.0, 1.0, n), rng.uniform(0, 1, n),
    ]).astype(np.float32)


def _timed(fn, repeats: int) -> tuple[float, object]:
    best, out = float("inf"), None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def cmd_bench(args) -> int:
    cfg = pipeline_config(args)
    cloud = _synthetic_cloud(args.points, args.seed, cfg.grid)
    rows = []
    t, img = _timed(lambda: encode(cloud, cfg.grid), args.repeats)
    rows.append(("encode", t))
    if not args.skip_net:
        det = BevDetector(cfg.net, init_weights(cfg.net, args.seed))
        t, dets = _timed(lambda: det.detect(img), args.net_repeats)
        rows.append(("forward+decode", t))
        boxes = [ScoredBox(d.footprint(cfg.grid), d.score, d.class_id) for d in dets]
        t, kept = _timed(lambda: nms_rotated(boxes, cfg.nms_iou), args.net_repeats)
        rows.append((f"nms ({len(boxes)} candidates)", t))
        t, _ = _timed(lambda: recover_boxes(kept, cloud, Calibration(), cfg.recovery), args.net_repeats)
        rows.append((f"recover ({len(kept)} boxes)", t))
    print(f"{'stage':<28}{'best ms':>10}")
    for name, t in rows:
        print(f"{name:<28}{1000 * t:>10.2f}")
    if args.json:
        Path(args.json).write_text(json.dumps({n: t for n, t in rows}, indent=2) + "\n")
    return 0


# -- parser ------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, workers: bool = False) -> None:
    p.add_argument("--config", help="key=value file; overrides flags")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config field")
    if workers:
        p.add_argument("--workers", type=int, default=1, help="frame-level worker processes")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bevkit", description="BEV LiDAR detection toolkit")
    p.add_argument("--version", action="version", version=f"bevkit {__version__}")
    p.add_argument("--data-root", default=os.environ.get(DATA_ROOT_ENV, "."),
                   help=f"base for relative paths (env {DATA_ROOT_ENV})")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("encode", help="rasterize velodyne scans into BEV images")
    s.add_argument("input", help="directory of <frame>.bin scans")
    s.add_argument("output")
    _common(s, workers=True)
    s.set_defaults(func=cmd_encode)

    s = sub.add_parser("augment", help="encode with a random vertical shift and intensity jitter")
    s.add_argument("input")
    s.add_argument("output")
    s.add_argument("--seed", type=int)
    s.add_argument("--dz-max", type=float, help="half-width of the symmetric vertical offset range")
    s.add_argument("--sigma", type=float, help="jitter standard deviation in 8-bit units")
    s.add_argument("--side-by-side", action="store_true", help="also write plain|augmented PNG pairs")
    _common(s, workers=True)
    s.set_defaults(func=cmd_augment)

    s = sub.add_parser("init-weights", help="write seeded random weights")
    s.add_argument("output")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--c-base", type=int)
    s.add_argument("--head", choices=("full", "baseline"))
    _common(s)
    s.set_defaults(func=cmd_init_weights)

    s = sub.add_parser("infer", help="detect, merge with NMS and lift to KITTI 3D results")
    s.add_argument("output")
    s.add_argument("--velodyne", help="scans; required for 3D recovery and multi-offset")
    s.add_argument("--cache", help="encode output to reuse instead of re-encoding")
    s.add_argument("--calib", help="calibration directory (identity when absent)")
    s.add_argument("--weights")
    s.add_argument("--random-weights", type=int, metavar="SEED")
    s.add_argument("--multi-offset", action="store_true")
    s.add_argument("--nms-iou", type=float)
    s.add_argument("--c-base", type=int)
    s.add_argument("--head", choices=("full", "baseline"))
    _common(s, workers=True)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("recover", help="lift BEV detections to KITTI 3D result files")
    s.add_argument("detections", help="directory of BEV detection files")
    s.add_argument("velodyne")
    s.add_argument("output")
    s.add_argument("--calib")
    _common(s, workers=True)
    s.set_defaults(func=cmd_recover)

    s = sub.add_parser("eval", help="BEV/3D AP against KITTI labels")
    s.add_argument("detections")
    s.add_argument("labels")
    s.add_argument("--output", help="directory for tables, curves and plots")
    s.add_argument("--mode", choices=("inclusive", "devkit"))
    s.add_argument("--neighbor-ignore", action="store_true")
    s.add_argument("--no-bands", action="store_true")
    s.add_argument("--no-plots", action="store_true")
    _common(s)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("plot-pr", help="render PR curves from a curves CSV")
    s.add_argument("curves")
    s.add_argument("output")
    s.set_defaults(func=cmd_plot_pr, config=None, set=None)

    s = sub.add_parser("forward-check", help="structural verification of the network")
    s.add_argument("--c-base", type=int)
    s.add_argument("--head", choices=("full", "baseline"))
    s.add_argument("--size", type=int, default=64, help="side of the square test input")
    s.add_argument("--seed", type=int, default=0)
    _common(s)
    s.set_defaults(func=cmd_forward_check)

    s = sub.add_parser("bench", help="per-stage wall-clock on a synthetic scan")
    s.add_argument("--points", type=int, default=120_000)
    s.add_argument("--repeats", type=int, default=20)
    s.add_argument("--net-repeats", type=int, default=1)
    s.add_argument("--skip-net", action="store_true")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--c-base", type=int)
    s.add_argument("--json", help="also write timings here")
    _common(s)
    s.set_defaults(func=cmd_bench)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (BevKitError, ValueError, KeyError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
