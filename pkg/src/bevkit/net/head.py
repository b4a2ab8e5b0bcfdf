"""Detection head outputs and their decoding into oriented BEV boxes."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from ..bev_encoder import GridConfig
from ..geometry import OrientedBevBox, box_polygon
from .ops import sigmoid, softmax


@dataclass
class DecodedDetection:
    """A BEV detection with corners in normalized image coordinates.

    ``corners`` is (4, 2) counter-clockwise, column/row positions divided
    by the unpadded image width/height, in the corner order produced by
    ``geometry.box_polygon``.
    """

    corners: np.ndarray
    class_id: int
    score: float

    def footprint(self, grid: GridConfig = GridConfig()) -> OrientedBevBox:
        (x0, x1), (y0, y1) = grid.x_range, grid.y_range
        pts = np.asarray(self.corners, dtype=np.float64) * [x1 - x0, y1 - y0] + [x0, y0]
        c = pts.mean(axis=0)
        w = float(np.linalg.norm(pts[1] - pts[0]))
        l = float(np.linalg.norm(pts[2] - pts[1]))
        head = pts[0] - pts[3]
        return OrientedBevBox(float(c[0]), float(c[1]), w, l, math.atan2(head[1], head[0]))

    @classmethod
    def from_footprint(cls, box: OrientedBevBox, class_id: int, score: float,
                       grid: GridConfig = GridConfig()) -> "DecodedDetection":
        (x0, x1), (y0, y1) = grid.x_range, grid.y_range
        corners = (box_polygon(box) - [x0, y0]) / [x1 - x0, y1 - y0]
        return cls(corners, int(class_id), float(score))


def dfl_expectation(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Expected bin index under a softmax over the bin axis."""
    logits = np.asarray(logits, dtype=np.float64)
    p = softmax(logits, axis=axis)
    bins = np.arange(logits.shape[axis], dtype=np.float64)
    shape = [1] * logits.ndim
    shape[axis] = -1
    return (p * bins.reshape(shape)).sum(axis=axis)


def angle_bin_centers(n_bins: int) -> np.ndarray:
    """Centres of ``n_bins`` equal bins covering (-pi, pi]."""
    return -math.pi + (np.arange(n_bins) + 0.5) * (2.0 * math.pi / n_bins)


def decode_angle(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    p = softmax(logits, axis=axis)
    shape = [1] * logits.ndim
    shape[axis] = -1
    return (p * angle_bin_centers(logits.shape[axis]).reshape(shape)).sum(axis=axis)


def detection_scores(obj: np.ndarray, cls: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """sigmoid(objectness) * sigmoid(best class logit), plus the best class id."""
    best = cls.argmax(axis=0)
    return sigmoid(obj) * sigmoid(cls.max(axis=0)), best


def head_decode(
    outputs: Mapping[str, Mapping[str, np.ndarray]],
    strides: Mapping[str, int],
    image_hw: tuple[int, int],
    conf_thresh: float = 0.25,
    max_candidates: int = 1000,
) -> list[DecodedDetection]:
    """Decode raw head maps of every level into detections.

    ``outputs[level]`` holds ``dfl`` (4, bins, h, w) side logits ordered
    left/top/right/bottom, ``cls`` (n_classes, h, w), ``obj`` (h, w) and
    ``ang`` (n_angle_bins, h, w). Side distances are measured in the box's
    own frame, in bins times the level stride. Detections whose centre
    falls in the zero padding beyond ``image_hw`` are dropped.
    """
    H_img, W_img = image_hw
    cand = []
    for order, (name, out) in enumerate(outputs.items()):
        score, best = detection_scores(out["obj"], out["cls"])
        rows, cols = np.nonzero(score >= conf_thresh)
        for r, c in zip(rows.tolist(), cols.tolist()):
            cand.append((-float(score[r, c]), order, r, c, name, int(best[r, c])))
    cand.sort(key=lambda t: t[:4])
    dets = []
    for neg_score, _, r, c, name, cls_id in cand:
        if len(dets) >= max_candidates:
            break
        out, s = outputs[name], strides[name]
        left, top, right, bottom = dfl_expectation(out["dfl"][:, :, r, c], axis=1) * s
        length, width = left + right, top + bottom
        if length <= 0 or width <= 0:
            continue
        theta = float(decode_angle(out["ang"][:, r, c], axis=0))
        ct, st = math.cos(theta), math.sin(theta)
        dx, dy = 0.5 * (right - left), 0.5 * (bottom - top)
        px = (c + 0.5) * s + ct * dx - st * dy
        py = (r + 0.5) * s + st * dx + ct * dy
        if not (0.0 <= px < W_img and 0.0 <= py < H_img):
            continue
        # box_polygon in pixel units, then normalized per axis
        poly = box_polygon(OrientedBevBox(px, py, width, length, theta))
        dets.append(DecodedDetection(poly / [W_img, H_img], cls_id, -neg_score))
    return dets
