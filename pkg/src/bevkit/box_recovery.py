"""Lift BEV detections to 3D boxes from the points under their footprint.

The bottom plane comes from the lowest returns inside a range-dilated
footprint, the top from the highest returns inside the plain footprint.
Both samples pass a Tukey fence before taking min/max, and implausible
heights fall back to a fixed prior.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .bev_encoder import GridConfig
from .errors import EmptyInput, NoSupportingPoints
from .geometry import (
    CLASS_NAMES,
    Box3D,
    OrientedBevBox,
    ScoredBox,
    box_polygon,
    dilate_polygon,
)
from .kitti_io import Calibration, KittiLabel, detection_label
from .net.head import DecodedDetection

log = logging.getLogger(__name__)

CONTAINMENT_EPS = 1e-9


@dataclass(frozen=True)
class RecoveryParams:
    alpha: float = 2.5
    d_max: float = 80.0
    n_extreme: int = 10
    iqr_k: float = 1.5
    h_min: float = 1.25
    h_max: float = 2.1
    h_default: float = 1.6

    def __post_init__(self):
        if min(self.alpha, self.d_max, self.n_extreme, self.iqr_k, self.h_min, self.h_max, self.h_default) <= 0:
            raise ValueError("recovery parameters must be positive")
        if not self.h_min < self.h_max:
            raise ValueError("h_min must be below h_max")


@dataclass(frozen=True)
class Extent:
    z_bottom: float
    z_top: float
    used_prior: bool


def inside_polygon(xy: np.ndarray, poly) -> np.ndarray:
    """Closed containment mask for points against a convex CCW polygon."""
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    P = np.asarray(poly, dtype=np.float64)
    mask = np.ones(len(xy), dtype=bool)
    for a, b in zip(P, np.roll(P, -1, axis=0)):
        ex, ey = b - a
        cross = ex * (xy[:, 1] - a[1]) - ey * (xy[:, 0] - a[0])
        mask &= cross >= -CONTAINMENT_EPS * math.hypot(ex, ey)
    return mask


def points_in_polygon(cloud: np.ndarray, poly) -> np.ndarray:
    """z values of the points whose (x, y) lies inside or on ``poly``."""
    pts = np.asarray(cloud)
    if len(pts) == 0:
        return np.empty(0, dtype=np.float64)
    return pts[inside_polygon(pts[:, :2], poly), 2].astype(np.float64)


class SortedCloud:
    """Cloud sorted by x so polygon queries only test an x-slab of points."""

    def __init__(self, cloud: np.ndarray):
        pts = np.asarray(cloud, dtype=np.float64)
        if pts.ndim != 2:
            pts = pts.reshape(-1, 4)
        order = np.argsort(pts[:, 0], kind="stable")
        self.points = pts[order]
        self.x = self.points[:, 0]

    def z_in(self, poly) -> np.ndarray:
        P = np.asarray(poly, dtype=np.float64)
        lo = np.searchsorted(self.x, P[:, 0].min() - 1e-6, side="left")
        hi = np.searchsorted(self.x, P[:, 0].max() + 1e-6, side="right")
        return points_in_polygon(self.points[lo:hi], P)


def percentile_linear(sorted_x: Sequence[float], q: float) -> float:
    """q-th percentile (0..100), linear interpolation between closest ranks."""
    n = len(sorted_x)
    pos = (n - 1) * q / 100.0
    lo = int(math.floor(pos))
    hi = min(lo + 1, n - 1)
    frac = pos - lo
    return sorted_x[lo] + (sorted_x[hi] - sorted_x[lo]) * frac


def tukey_fence(x: Sequence[float], k: float = 1.5) -> tuple[float, float]:
    s = sorted(float(v) for v in x)
    if not s:
        raise EmptyInput("Tukey fence of an empty sample")
    q1, q3 = percentile_linear(s, 25.0), percentile_linear(s, 75.0)
    iqr = q3 - q1
    return q1 - k * iqr, q3 + k * iqr


def tukey_inliers(x: Sequence[float], k: float = 1.5) -> list[float]:
    """Order-preserving filter keeping values inside the Tukey fence."""
    vals = [float(v) for v in x]
    lo, hi = tukey_fence(vals, k)
    return [v for v in vals if lo <= v <= hi]


def estimate_extent(
    cloud: np.ndarray | SortedCloud,
    box: OrientedBevBox,
    params: RecoveryParams = RecoveryParams(),
) -> Extent:
    """Bottom and top of the object standing on ``box``.

    Points are selected in the sensor frame, so the Euclidean range used
    for dilation is measured from the sensor origin.
    """
    if not isinstance(cloud, SortedCloud):
        cloud = SortedCloud(cloud)
    poly = box_polygon(box)
    d = math.hypot(box.cx, box.cy)
    bottom_z = cloud.z_in(dilate_polygon(poly, d, params.alpha, params.d_max))
    if len(bottom_z) == 0:
        raise NoSupportingPoints(f"no returns under footprint at ({box.cx:.2f}, {box.cy:.2f})")
    lowest = np.sort(bottom_z)[: params.n_extreme]
    z_b = min(tukey_inliers(lowest, params.iqr_k))

    top_z = cloud.z_in(poly)
    if len(top_z) == 0:
        return Extent(z_b, z_b + params.h_default, True)
    highest = np.sort(top_z)[::-1][: params.n_extreme]
    z_t = max(tukey_inliers(highest, params.iqr_k))
    h = z_t - z_b
    if h < params.h_min or h > params.h_max:
        return Extent(z_b, z_b + params.h_default, True)
    return Extent(z_b, z_t, False)


def recover_boxes(
    dets: Sequence[ScoredBox],
    cloud: np.ndarray,
    calib: Calibration,
    params: RecoveryParams = RecoveryParams(),
) -> list[KittiLabel]:
    """KITTI result labels for every metric footprint with supporting points."""
    out = []
    index = SortedCloud(cloud)
    for det in dets:
        try:
            ext = estimate_extent(index, det.box, params)
        except NoSupportingPoints as exc:
            log.info("dropping %s detection (score %.3f): %s", CLASS_NAMES[det.class_id], det.score, exc)
            continue
        box = Box3D(det.box, ext.z_bottom, ext.z_top)
        out.append(detection_label(box, calib, CLASS_NAMES[det.class_id], det.score))
    return out


def recover(
    dets: Sequence[DecodedDetection],
    cloud: np.ndarray,
    calib: Calibration,
    grid: GridConfig = GridConfig(),
    params: RecoveryParams = RecoveryParams(),
) -> list[KittiLabel]:
    """Same as ``recover_boxes`` for head detections in normalized coordinates."""
    boxes = [ScoredBox(d.footprint(grid), d.score, d.class_id) for d in dets]
    return recover_boxes(boxes, cloud, calib, params)
