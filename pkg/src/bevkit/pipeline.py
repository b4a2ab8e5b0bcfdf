"""Per-frame pipeline stages shared by the command-line tools.

Every stage reads its inputs from disk and writes its outputs under a
caller-chosen directory, one file per frame named after the frame id, so
stages can run in any order across a worker pool.
"""

from __future__ import annotations

import concurrent.futures as cf
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from PIL import Image

from . import config as _config
from .augmentation import (
    INFERENCE_OFFSETS,
    AugmentParams,
    draw_offsets,
    frame_seed,
    jitter,
    rebin_shift,
)
from .bev_encoder import BevImage, GridConfig, encode, read_raw, render_png, write_raw
from .box_recovery import RecoveryParams, recover_boxes
from .errors import BevKitError
from .evaluator import EvalConfig
from .geometry import ScoredBox, nms_rotated
from .kitti_io import (
    Calibration,
    read_bev_detections,
    read_calib,
    read_velodyne,
    write_bev_detections,
    write_detections,
)
from .net.model import BevDetector, NetConfig, init_weights
from .net.weights_io import load_weights

log = logging.getLogger(__name__)

RAW_SUFFIX = ".bev"


@dataclass(frozen=True)
class PipelineConfig:
    grid: GridConfig = field(default_factory=GridConfig)
    augment: AugmentParams = field(default_factory=AugmentParams)
    net: NetConfig = field(default_factory=NetConfig)
    recovery: RecoveryParams = field(default_factory=RecoveryParams)
    eval: EvalConfig = field(default_factory=EvalConfig)
    nms_iou: float = 0.5
    multi_offset: bool = False

    def __post_init__(self):
        if not 0.0 <= self.nms_iou <= 1.0:
            raise ValueError("nms_iou must lie in [0, 1]")

    def to_text(self) -> str:
        return _config.to_text(self)

    def with_pairs(self, pairs: dict[str, str]) -> "PipelineConfig":
        return _config.apply_pairs(self, pairs)


# -- frame discovery -------------------------------------------------------

def frame_ids(directory: str | os.PathLike, suffix: str) -> list[str]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"{d} is not a directory")
    return sorted(p.name[: -len(suffix)] for p in d.iterdir() if p.is_file() and p.name.endswith(suffix))


def frame_calib(calib_dir: str | os.PathLike | None, frame: str) -> Calibration:
    if calib_dir is None:
        return Calibration()
    return read_calib(Path(calib_dir) / f"{frame}.txt")


# -- stages ------------------------------------------------------------------

def encode_stage(frame: str, velodyne_dir, out_dir, cfg: PipelineConfig) -> dict:
    img = encode(read_velodyne(Path(velodyne_dir) / f"{frame}.bin"), cfg.grid)
    out = Path(out_dir)
    render_png(img, out / f"{frame}.png")
    write_raw(img, out / f"{frame}{RAW_SUFFIX}")
    return {"occupied_cells": int(np.count_nonzero(img.pixels.any(axis=2)))}


def augment_stage(frame: str, velodyne_dir, out_dir, cfg: PipelineConfig, side_by_side: bool = False) -> dict:
    """Seeded per frame id, so the output does not depend on frame order."""
    cloud = read_velodyne(Path(velodyne_dir) / f"{frame}.bin")
    rng = np.random.default_rng(frame_seed(cfg.augment.rng_seed, frame))
    dz, jit = draw_offsets(cfg.augment, rng)
    img = jitter(encode(rebin_shift(cloud, dz), cfg.grid), jit)
    out = Path(out_dir)
    render_png(img, out / f"{frame}.png")
    write_raw(img, out / f"{frame}{RAW_SUFFIX}")
    if side_by_side:
        plain = encode(cloud, cfg.grid)
        Image.fromarray(np.concatenate([plain.pixels, img.pixels], axis=1)).save(out / f"{frame}_pair.png")
    return {"dz": round(dz, 9), "jitter": round(jit, 9)}


def frame_images(frame: str, velodyne_dir, cache_dir, cfg: PipelineConfig) -> list[BevImage]:
    """The encodings inference runs on: one, or one per vertical offset."""
    if cfg.multi_offset:
        cloud = read_velodyne(Path(velodyne_dir) / f"{frame}.bin")
        return [encode(rebin_shift(cloud, dz), cfg.grid) for dz in INFERENCE_OFFSETS]
    if cache_dir is not None:
        return [read_raw(Path(cache_dir) / f"{frame}{RAW_SUFFIX}", cfg.grid)]
    return [encode(read_velodyne(Path(velodyne_dir) / f"{frame}.bin"), cfg.grid)]


def detect_candidates(detector: BevDetector, images: Sequence[BevImage], grid: GridConfig) -> list[ScoredBox]:
    """Decoded detections of every encoding, concatenated before NMS."""
    out = []
    for img in images:
        for d in detector.detect(img):
            out.append(ScoredBox(d.footprint(grid), d.score, d.class_id))
    return out


def infer_stage(frame: str, velodyne_dir, cache_dir, calib_dir, out_dir, cfg: PipelineConfig,
                detector: BevDetector) -> dict:
    images = frame_images(frame, velodyne_dir, cache_dir, cfg)
    candidates = detect_candidates(detector, images, cfg.grid)
    kept = nms_rotated(candidates, cfg.nms_iou)
    bev_path = Path(out_dir) / "bev" / f"{frame}.txt"
    write_bev_detections(kept, bev_path)
    info = {"candidates": len(candidates), "detections": len(kept)}
    if velodyne_dir is not None:
        info["labels"] = recover_stage(frame, Path(out_dir) / "bev", velodyne_dir, calib_dir,
                                       Path(out_dir) / "label_2", cfg)["labels"]
    return info


def recover_stage(frame: str, bev_dir, velodyne_dir, calib_dir, out_dir, cfg: PipelineConfig) -> dict:
    # always reparse the written detections so a standalone run reproduces infer
    dets = read_bev_detections(Path(bev_dir) / f"{frame}.txt")
    cloud = read_velodyne(Path(velodyne_dir) / f"{frame}.bin")
    labels = recover_boxes(dets, cloud, frame_calib(calib_dir, frame), cfg.recovery)
    write_detections(labels, Path(out_dir) / f"{frame}.txt")
    return {"labels": len(labels)}


# -- detector construction ---------------------------------------------------

def build_detector(cfg: PipelineConfig, weights_path=None, random_seed: int | None = None) -> BevDetector:
    if weights_path is not None:
        weights = load_weights(weights_path)
    elif random_seed is not None:
        weights = init_weights(cfg.net, random_seed)
    else:
        raise ValueError("need a weights file or a random seed")
    return BevDetector(cfg.net, weights)


# -- batch runner ----------------------------------------------------------------

_WORKER_STATE: dict = {}


def _worker_init(factory: Callable | None) -> None:
    _WORKER_STATE.clear()
    if factory is not None:
        _WORKER_STATE["shared"] = factory()


def _run_one(stage: Callable, frame: str, args: tuple) -> tuple[str, dict | None, str | None]:
    try:
        extra = (_WORKER_STATE["shared"],) if "shared" in _WORKER_STATE else ()
        return frame, stage(frame, *args, *extra), None
    except (BevKitError, OSError, ValueError) as exc:
        log.warning("frame %s failed: %s: %s", frame, type(exc).__name__, exc)
        return frame, None, f"{type(exc).__name__}: {exc}"


@dataclass
class BatchResult:
    command: str
    frames: dict[str, dict] = field(default_factory=dict)
    failed: dict[str, str] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.failed

    def to_json(self) -> str:
        doc = {
            "command": self.command,
            "total": len(self.frames) + len(self.failed),
            "succeeded": len(self.frames),
            "failed": dict(sorted(self.failed.items())),
            "frames": dict(sorted(self.frames.items())),
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def run_frames(command: str, stage: Callable, frames: Sequence[str], args: tuple, workers: int = 1,
               shared_factory: Callable | None = None) -> BatchResult:
    """Apply ``stage(frame, *args[, shared])`` to every frame.

    ``shared_factory`` builds per-process state (the detector) once per
    worker. Results are keyed by frame id, so the outcome does not depend
    on scheduling.
    """
    res = BatchResult(command)
    if workers <= 1:
        _worker_init(shared_factory)
        outcomes = [_run_one(stage, f, args) for f in frames]
        _WORKER_STATE.clear()
    else:
        with cf.ProcessPoolExecutor(workers, initializer=_worker_init, initargs=(shared_factory,)) as ex:
            outcomes = list(ex.map(_run_one, [stage] * len(frames), frames, [args] * len(frames)))
    for frame, info, err in outcomes:
        if err is None:
            res.frames[frame] = info
        else:
            res.failed[frame] = err
    return res


def write_summary(result: BatchResult, out_dir) -> Path:
    path = Path(out_dir) / "summary.json"
    path.write_text(result.to_json())
    return path

