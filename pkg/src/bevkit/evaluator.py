"""KITTI-style BEV / 3D average precision at 40 recall positions.

Boxes are compared in the rectified camera frame: the BEV footprint lives
in the (x, z) plane and the vertical extent runs from ``-y`` (bottom face)
up by the box height.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import config as _config
from .errors import FrameSetMismatch, NoGroundTruth
from .geometry import Box3D, OrientedBevBox, iou_3d, rotated_iou
from .kitti_io import KittiLabel, read_labels

log = logging.getLogger(__name__)

DIFFICULTIES = ("easy", "moderate", "hard")
SPACES = ("bev", "3d")
EVAL_CLASSES = ("Car", "Pedestrian", "Cyclist")
NEIGHBOR_CLASSES = {"Car": ("Van",), "Pedestrian": ("Person_sitting",), "Cyclist": ()}
DONTCARE_OVERLAP = 0.5


@dataclass(frozen=True)
class EvalConfig:
    iou_thresholds: dict = field(default_factory=lambda: {"Car": 0.7, "Pedestrian": 0.5, "Cyclist": 0.5})
    recall_points: int = 40
    min_bbox_height: tuple[float, ...] = (40.0, 25.0, 25.0)
    max_occlusion: tuple[int, ...] = (0, 1, 2)
    max_truncation: tuple[float, ...] = (0.15, 0.30, 0.50)
    # contiguous [edge_i, edge_i+1) range bands in metres
    distance_band_edges: tuple[float, ...] = (0.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0)
    mode: str = "inclusive"
    neighbor_ignore: bool = False

    def __post_init__(self):
        if self.mode not in ("inclusive", "devkit"):
            raise ValueError(f"mode must be 'inclusive' or 'devkit', got {self.mode!r}")
        if any(not 0.0 < t <= 1.0 for t in self.iou_thresholds.values()):
            raise ValueError("IoU thresholds must lie in (0, 1]")
        levels = (self.min_bbox_height, self.max_occlusion, self.max_truncation)
        if any(len(v) != len(DIFFICULTIES) for v in levels):
            raise ValueError("need one rule per difficulty level")
        if not (
            list(self.min_bbox_height) == sorted(self.min_bbox_height, reverse=True)
            and list(self.max_occlusion) == sorted(self.max_occlusion)
            and list(self.max_truncation) == sorted(self.max_truncation)
        ):
            raise ValueError("difficulty rules must loosen from easy to hard")
        if list(self.distance_band_edges) != sorted(set(self.distance_band_edges)):
            raise ValueError("distance band edges must be strictly increasing")

    @property
    def distance_bands(self) -> list[tuple[float, float]]:
        e = self.distance_band_edges
        return list(zip(e[:-1], e[1:]))

    def recall_samples(self) -> np.ndarray:
        n = self.recall_points
        if self.mode == "inclusive":
            return np.linspace(0.0, 1.0, n)
        return np.arange(1, n + 1) / n

    def to_text(self) -> str:
        return _config.to_text(self)


# -- label geometry -------------------------------------------------------

def label_footprint(lab: KittiLabel) -> OrientedBevBox:
    _, w, l = lab.dimensions
    x, _, z = lab.location
    return OrientedBevBox(x, z, w, l, -lab.rotation_y)


def label_box3d(lab: KittiLabel) -> Box3D:
    h = lab.dimensions[0]
    y = lab.location[1]
    return Box3D(label_footprint(lab), -y, -y + h)


def label_range(lab: KittiLabel) -> float:
    x, _, z = lab.location
    return math.hypot(x, z)


def has_geometry(lab: KittiLabel) -> bool:
    return min(lab.dimensions) > 0


def bev_iou(a: KittiLabel, b: KittiLabel) -> float:
    return rotated_iou(label_footprint(a), label_footprint(b))


def iou3d(a: KittiLabel, b: KittiLabel) -> float:
    return iou_3d(label_box3d(a), label_box3d(b))


IOU_FUNCTIONS: dict[str, Callable[[KittiLabel, KittiLabel], float]] = {"bev": bev_iou, "3d": iou3d}


def bbox_overlap_of_first(a: KittiLabel, b: KittiLabel) -> float:
    """Image-plane intersection area divided by the area of ``a``."""
    al, at, ar, ab = a.bbox2d
    bl, bt, br, bb = b.bbox2d
    iw = min(ar, br) - max(al, bl)
    ih = min(ab, bb) - max(at, bt)
    area = (ar - al) * (ab - at)
    if iw <= 0 or ih <= 0 or area <= 0:
        return 0.0
    return iw * ih / area


# -- difficulty -------------------------------------------------------------

def assign_difficulty(lab: KittiLabel, cfg: EvalConfig = EvalConfig()) -> set[str]:
    out = set()
    for i, name in enumerate(DIFFICULTIES):
        if (
            lab.bbox_height >= cfg.min_bbox_height[i]
            and lab.occlusion <= cfg.max_occlusion[i]
            and lab.truncation <= cfg.max_truncation[i]
        ):
            out.add(name)
    return out


# -- matching ---------------------------------------------------------------

def match_frame(
    dets: Sequence,
    gts: Sequence,
    iou_fn: Callable,
    thresh: float,
    gt_ignored: Sequence[bool] | None = None,
    det_ignored: Sequence[bool] | None = None,
    dontcare_hit: Callable[[object], bool] | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Greedy matching of score-sorted detections to ground truth.

    Each detection takes the unmatched non-ignored ground truth with the
    highest IoU >= ``thresh`` (TP). Failing that, a match with an ignored
    ground truth or a don't-care hit marks it ignored; otherwise it is FP.
    Detections flagged in ``det_ignored`` never match.
    """
    nd, ng = len(dets), len(gts)
    gt_ignored = [False] * ng if gt_ignored is None else list(gt_ignored)
    tp = np.zeros(nd, dtype=bool)
    fp = np.zeros(nd, dtype=bool)
    ign = np.zeros(nd, dtype=bool)
    used = [False] * ng
    for i, d in enumerate(dets):
        if det_ignored is not None and det_ignored[i]:
            ign[i] = True
            continue
        ious = [iou_fn(d, g) if not used[j] else -1.0 for j, g in enumerate(gts)]
        best = {False: (-1, -1.0), True: (-1, -1.0)}
        for j, v in enumerate(ious):
            if v >= thresh and v > best[gt_ignored[j]][1]:
                best[gt_ignored[j]] = (j, v)
        if best[False][0] >= 0:
            used[best[False][0]] = True
            tp[i] = True
        elif best[True][0] >= 0:
            used[best[True][0]] = True
            ign[i] = True
        elif dontcare_hit is not None and dontcare_hit(d):
            ign[i] = True
        else:
            fp[i] = True
    return tp, fp, ign


# -- PR curve and AP ----------------------------------------------------------

@dataclass
class PRCurve:
    scores: np.ndarray  # threshold at each point (descending)
    tp: np.ndarray  # cumulative true positives
    fp: np.ndarray  # cumulative false positives
    n_gt: int

    @property
    def recall(self) -> np.ndarray:
        return self.tp / self.n_gt if self.n_gt else np.zeros(len(self.tp))

    @property
    def precision(self) -> np.ndarray:
        denom = self.tp + self.fp
        return np.divide(self.tp, denom, out=np.zeros(len(self.tp)), where=denom > 0)


def build_curve(records: Iterable[tuple[float, bool]], n_gt: int) -> PRCurve:
    """PR points at every distinct score threshold.

    ``records`` are (score, is_tp) for every non-ignored detection.
    """
    recs = sorted(records, key=lambda r: -r[0])
    scores, tps, fps = [], [], []
    tp = fp = 0
    for i, (s, is_tp) in enumerate(recs):
        tp += bool(is_tp)
        fp += not is_tp
        if i + 1 == len(recs) or recs[i + 1][0] != s:
            scores.append(s)
            tps.append(tp)
            fps.append(fp)
    return PRCurve(np.array(scores, dtype=np.float64), np.array(tps), np.array(fps), n_gt)


def interpolated_precision(curve: PRCurve, recall_samples: np.ndarray) -> np.ndarray:
    """max precision over points with recall >= r, for each sample r (0 if none)."""
    rec, prec = curve.recall, curve.precision
    out = np.zeros(len(recall_samples))
    if len(rec) == 0:
        return out
    # running max from the tail gives max over recall >= r
    tail_max = np.maximum.accumulate(prec[::-1])[::-1]
    for i, r in enumerate(recall_samples):
        idx = np.searchsorted(rec, r - 1e-12, side="left")
        if idx < len(rec):
            out[i] = tail_max[idx]
    return out


def average_precision(curve: PRCurve, recall_samples: np.ndarray) -> float:
    return float(interpolated_precision(curve, recall_samples).mean())


# -- evaluation over frames -------------------------------------------------

def _sorted_dets(dets: Sequence[KittiLabel], class_name: str) -> list[KittiLabel]:
    own = [d for d in dets if d.class_name == class_name]
    return sorted(own, key=lambda d: -(1.0 if d.score is None else d.score))


def _score(d: KittiLabel) -> float:
    return 1.0 if d.score is None else float(d.score)


class Evaluator:
    """Matches detections to ground truth and builds PR curves.

    ``dets`` and ``gts`` map frame id to label lists. IoU matrices are
    cached per (frame, class, space) so sweeping difficulties and distance
    bands stays cheap.
    """

    def __init__(self, dets: Mapping[str, Sequence[KittiLabel]],
                 gts: Mapping[str, Sequence[KittiLabel]], cfg: EvalConfig = EvalConfig()):
        extra = sorted(set(dets) - set(gts))
        if extra:
            raise FrameSetMismatch(f"detections for frames without ground truth: {extra[:5]}")
        self.cfg = cfg
        self.gts = {f: list(v) for f, v in gts.items()}
        self.dets = {f: list(dets.get(f, ())) for f in self.gts}
        self._iou: dict[tuple[str, str, str], np.ndarray] = {}

    def _frame_gts(self, frame: str, class_name: str) -> list[KittiLabel]:
        names = {class_name}
        if self.cfg.neighbor_ignore:
            names.update(NEIGHBOR_CLASSES.get(class_name, ()))
        return [g for g in self.gts[frame] if g.class_name in names]

    def _iou_matrix(self, frame: str, class_name: str, space: str, dets, gts) -> np.ndarray:
        key = (frame, class_name, space)
        if key not in self._iou:
            fn = IOU_FUNCTIONS[space]
            m = np.zeros((len(dets), len(gts)))
            for i, d in enumerate(dets):
                for j, g in enumerate(gts):
                    if has_geometry(d) and has_geometry(g):
                        m[i, j] = fn(d, g)
            self._iou[key] = m
        return self._iou[key]

    def curve(self, class_name: str, difficulty: str, space: str = "bev",
              band: tuple[float, float] | None = None) -> PRCurve:
        cfg = self.cfg
        level = DIFFICULTIES.index(difficulty)
        thresh = cfg.iou_thresholds[class_name]
        records: list[tuple[float, bool]] = []
        n_gt = 0
        for frame in sorted(self.gts):
            dets = _sorted_dets(self.dets[frame], class_name)
            gts = self._frame_gts(frame, class_name)
            dontcare = [g for g in self.gts[frame] if g.class_name == "DontCare"]
            iou = self._iou_matrix(frame, class_name, space, dets, gts)

            def in_band(lab):
                return band is None or band[0] <= label_range(lab) < band[1]

            gt_ign = [
                g.class_name != class_name or difficulty not in assign_difficulty(g, cfg) or not in_band(g)
                for g in gts
            ]
            n_gt += gt_ign.count(False)
            det_ign = None
            if cfg.mode == "devkit":
                det_ign = [d.has_bbox and d.bbox_height < cfg.min_bbox_height[level] for d in dets]

            def dontcare_hit(i, dets=dets, dontcare=dontcare):
                return any(self._hits_dontcare(dets[i], dc, space, thresh) for dc in dontcare)

            tp, fp, ign = match_frame(
                range(len(dets)), range(len(gts)), lambda i, j, iou=iou: iou[i, j], thresh,
                gt_ignored=gt_ign, det_ignored=det_ign, dontcare_hit=dontcare_hit,
            )
            for i, d in enumerate(dets):
                if ign[i] or (fp[i] and not in_band(d)):
                    continue
                records.append((_score(d), bool(tp[i])))
        return build_curve(records, n_gt)

    @staticmethod
    def _hits_dontcare(det: KittiLabel, dc: KittiLabel, space: str, thresh: float) -> bool:
        if det.has_bbox and dc.has_bbox:
            return bbox_overlap_of_first(det, dc) > DONTCARE_OVERLAP
        if has_geometry(det) and has_geometry(dc):
            return bev_iou(det, dc) >= thresh
        return False

    def ap(self, class_name: str, difficulty: str, space: str = "bev",
           band: tuple[float, float] | None = None) -> float:
        """AP over the configured recall samples."""
        c = self.curve(class_name, difficulty, space, band)
        if c.n_gt == 0:
            raise NoGroundTruth(f"no {difficulty} {class_name} ground truth")
        return average_precision(c, self.cfg.recall_samples())


def ap40(dets, gts, space: str, class_name: str, difficulty: str,
         cfg: EvalConfig = EvalConfig()) -> float:
    return Evaluator(dets, gts, cfg).ap(class_name, difficulty, space)


# -- directory-level evaluation and reports -------------------------------

@dataclass
class ReportRow:
    class_name: str
    difficulty: str
    space: str
    band: tuple[float, float] | None
    ap: float | None
    n_gt: int


@dataclass
class EvalReport:
    mode: str
    recall_points: int
    rows: list[ReportRow]
    curves: dict[tuple[str, str, str], PRCurve]

    def get(self, class_name, difficulty, space, band=None) -> float | None:
        for r in self.rows:
            if (r.class_name, r.difficulty, r.space, r.band) == (class_name, difficulty, space, band):
                return r.ap
        raise KeyError((class_name, difficulty, space, band))

    def mean_ap(self, class_name: str, space: str, band=None) -> float | None:
        vals = [self.get(class_name, d, space, band) for d in DIFFICULTIES]
        vals = [v for v in vals if v is not None]
        return float(np.mean(vals)) if vals else None


def load_label_dir(directory: str | os.PathLike) -> dict[str, list[KittiLabel]]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"{d} is not a directory")
    return {p.stem: read_labels(p) for p in sorted(d.glob("*.txt"))}


def evaluate_labels(dets, gts, cfg: EvalConfig = EvalConfig(), classes=EVAL_CLASSES,
                    with_bands: bool = True) -> EvalReport:
    ev = Evaluator(dets, gts, cfg)
    rows, curves = [], {}
    bands: list = [None] + (cfg.distance_bands if with_bands else [])
    for cls in classes:
        for space in SPACES:
            for diff in DIFFICULTIES:
                for band in bands:
                    c = ev.curve(cls, diff, space, band)
                    ap = None if c.n_gt == 0 else average_precision(c, cfg.recall_samples())
                    rows.append(ReportRow(cls, diff, space, band, ap, c.n_gt))
                    if band is None:
                        curves[(cls, diff, space)] = c
    return EvalReport(cfg.mode, cfg.recall_points, rows, curves)


def evaluate(det_dir, gt_dir, cfg: EvalConfig = EvalConfig(), **kw) -> EvalReport:
    """Evaluate a directory of result files against a label directory.

    Frames without a result file count as frames with no detections;
    result files for frames missing from ``gt_dir`` raise FrameSetMismatch.
    """
    gts = load_label_dir(gt_dir)
    dets = load_label_dir(det_dir) if Path(det_dir).exists() else {}
    return evaluate_labels(dets, gts, cfg, **kw)


def _fmt(v: float | None) -> str:
    return "  n/a" if v is None else f"{100 * v:6.2f}"


def format_table(report: EvalReport) -> str:
    out = io.StringIO()
    out.write(f"AP (%) at {report.recall_points} recall positions, mode={report.mode}\n")
    out.write(f"{'class':<11}{'space':<6}{'easy':>8}{'mod':>8}{'hard':>8}{'mAP':>8}\n")
    classes = sorted({r.class_name for r in report.rows}, key=list(EVAL_CLASSES).index)
    for cls in classes:
        for space in SPACES:
            vals = [report.get(cls, d, space) for d in DIFFICULTIES]
            out.write(f"{cls:<11}{space:<6}" + "".join(f"{_fmt(v):>8}" for v in vals)
                      + f"{_fmt(report.mean_ap(cls, space)):>8}\n")
    bands = sorted({r.band for r in report.rows if r.band is not None})
    if bands:
        out.write("\nmAP (%) by distance band\n")
        out.write(f"{'class':<11}{'space':<6}" + "".join(f"{f'{a:g}-{b:g}':>8}" for a, b in bands) + "\n")
        for cls in classes:
            for space in SPACES:
                out.write(f"{cls:<11}{space:<6}"
                          + "".join(f"{_fmt(report.mean_ap(cls, space, b)):>8}" for b in bands) + "\n")
    return out.getvalue()


def write_csv(report: EvalReport, path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mode", "class", "difficulty", "space", "band_min", "band_max", "n_gt", "ap"])
        for r in report.rows:
            lo, hi = r.band if r.band else ("", "")
            w.writerow([report.mode, r.class_name, r.difficulty, r.space, lo, hi, r.n_gt,
                        "" if r.ap is None else f"{r.ap:.6f}"])


def write_curves_csv(report: EvalReport, path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "difficulty", "space", "score", "recall", "precision"])
        for (cls, diff, space), c in report.curves.items():
            for s, r, p in zip(c.scores, c.recall, c.precision):
                w.writerow([cls, diff, space, f"{s:.6f}", f"{r:.6f}", f"{p:.6f}"])


def read_curves_csv(path: str | os.PathLike) -> dict[tuple[str, str, str], tuple[list[float], list[float]]]:
    out: dict = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rec, prec = out.setdefault((row["class"], row["difficulty"], row["space"]), ([], []))
            rec.append(float(row["recall"]))
            prec.append(float(row["precision"]))
    return out


def plot_pr_curves(curves, out_dir: str | os.PathLike) -> list[Path]:
    """One PNG per (class, space) with the easy/moderate/hard curves.

    ``curves`` maps (class, difficulty, space) to (recall, precision) lists.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for cls, space in sorted({(c, s) for c, _, s in curves}):
        fig, ax = plt.subplots(figsize=(4, 3.2), dpi=100)
        for diff in DIFFICULTIES:
            if (cls, diff, space) not in curves:
                continue
            rec, prec = curves[(cls, diff, space)]
            ax.plot([0.0, *rec], [1.0 if len(prec) else 0.0, *prec], label=diff)
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.02)
        ax.set_xlabel("recall")
        ax.set_ylabel("precision")
        ax.set_title(f"{cls} {space.upper()}")
        ax.legend(loc="lower left")
        fig.tight_layout()
        path = out_dir / f"pr_{cls.lower()}_{space}.png"
        # fixed metadata keeps reruns byte-identical
        fig.savefig(path, metadata={"Software": None})
        plt.close(fig)
        written.append(path)
    return written


def report_curves(report: EvalReport):
    return {k: (list(c.recall), list(c.precision)) for k, c in report.curves.items()}
