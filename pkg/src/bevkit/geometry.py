"""Oriented ground-plane boxes: polygons, convex clipping, rotated/3D IoU and NMS.

Polygons are handled internally as lists of ``(x, y)`` tuples because the
hot paths (IoU inside NMS and evaluation matching) work on 4-8 vertices
where numpy call overhead dominates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

CLIP_EPS = 1e-9
AREA_EPS = 1e-12

CLASS_NAMES = ("Car", "Pedestrian", "Cyclist")


def wrap_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    a = math.fmod(a, 2.0 * math.pi)
    if a <= -math.pi:
        a += 2.0 * math.pi
    elif a > math.pi:
        a -= 2.0 * math.pi
    return a


@dataclass(frozen=True)
class OrientedBevBox:
    """Ground-plane rectangle. ``l`` runs along the heading, ``w`` across it."""

    cx: float
    cy: float
    w: float
    l: float
    yaw: float = 0.0

    def __post_init__(self):
        if not (self.w > 0 and self.l > 0):
            raise ValueError(f"box extents must be positive, got w={self.w}, l={self.l}")
        if not all(math.isfinite(v) for v in (self.cx, self.cy, self.yaw)):
            raise ValueError("box parameters must be finite")
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    @property
    def area(self) -> float:
        return self.w * self.l

    @property
    def radius(self) -> float:
        return 0.5 * math.hypot(self.w, self.l)


@dataclass(frozen=True)
class Box3D:
    footprint: OrientedBevBox
    z_bottom: float
    z_top: float

    def __post_init__(self):
        if not self.z_top > self.z_bottom:
            raise ValueError("z_top must exceed z_bottom")

    @property
    def height(self) -> float:
        return self.z_top - self.z_bottom

    @property
    def volume(self) -> float:
        return self.footprint.area * self.height


@dataclass(frozen=True)
class ScoredBox:
    box: OrientedBevBox
    score: float
    class_id: int = 0

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


def _corners(box: OrientedBevBox) -> list[tuple[float, float]]:
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    hl, hw = 0.5 * box.l, 0.5 * box.w
    out = []
    for lx, ly in ((hl, -hw), (hl, hw), (-hl, hw), (-hl, -hw)):
        out.append((box.cx + c * lx - s * ly, box.cy + s * lx + c * ly))
    return out


def box_polygon(box: OrientedBevBox) -> np.ndarray:
    """Return the 4 footprint corners, counter-clockwise, as a (4, 2) array."""
    return np.array(_corners(box), dtype=np.float64)


def polygon_area(poly) -> float:
    """Signed shoelace area; positive for counter-clockwise vertex order."""
    n = len(poly)
    if n < 3:
        return 0.0
    acc = 0.0
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        acc += x0 * y1 - x1 * y0
    return 0.5 * acc


def polygon_centroid(poly) -> tuple[float, float]:
    """Area centroid of a simple polygon (vertex mean if degenerate)."""
    pts = [(float(x), float(y)) for x, y in poly]
    a = polygon_area(pts)
    n = len(pts)
    if abs(a) < AREA_EPS:
        return (sum(p[0] for p in pts) / n, sum(p[1] for p in pts) / n)
    # shift to the first vertex to keep the sums well conditioned
    ox, oy = pts[0]
    cx = cy = 0.0
    for i in range(n):
        x0, y0 = pts[i][0] - ox, pts[i][1] - oy
        x1, y1 = pts[(i + 1) % n][0] - ox, pts[(i + 1) % n][1] - oy
        cr = x0 * y1 - x1 * y0
        cx += (x0 + x1) * cr
        cy += (y0 + y1) * cr
    return (ox + cx / (6.0 * a), oy + cy / (6.0 * a))


def clip_convex(subject, clip) -> list[tuple[float, float]]:
    """Sutherland-Hodgman: clip ``subject`` by the convex CCW polygon ``clip``."""
    out = list(subject)
    n = len(clip)
    for i in range(n):
        if not out:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        inp = out
        out = []
        m = len(inp)
        for j in range(m):
            px, py = inp[j - 1]
            qx, qy = inp[j]
            sp = ex * (py - ay) - ey * (px - ax)
            sq = ex * (qy - ay) - ey * (qx - ax)
            p_in = sp >= -CLIP_EPS
            q_in = sq >= -CLIP_EPS
            if q_in:
                if not p_in:
                    t = sp / (sp - sq)
                    out.append((px + t * (qx - px), py + t * (qy - py)))
                out.append((qx, qy))
            elif p_in:
                denom = sp - sq
                if denom != 0.0:
                    t = sp / denom
                    out.append((px + t * (qx - px), py + t * (qy - py)))
    return out


def intersection_area(a: OrientedBevBox, b: OrientedBevBox) -> float:
    dx, dy = a.cx - b.cx, a.cy - b.cy
    if dx * dx + dy * dy > (a.radius + b.radius) ** 2:
        return 0.0
    inter = polygon_area(clip_convex(_corners(a), _corners(b)))
    return inter if inter > AREA_EPS else 0.0


def rotated_iou(a: OrientedBevBox, b: OrientedBevBox) -> float:
    inter = intersection_area(a, b)
    if inter == 0.0:
        return 0.0
    union = a.area + b.area - inter
    return min(1.0, inter / union)


def iou_3d(a: Box3D, b: Box3D) -> float:
    dz = min(a.z_top, b.z_top) - max(a.z_bottom, b.z_bottom)
    if dz <= 0.0:
        return 0.0
    inter = intersection_area(a.footprint, b.footprint) * dz
    if inter == 0.0:
        return 0.0
    return min(1.0, inter / (a.volume + b.volume - inter))


def dilation_scale(d: float, alpha: float = 2.5, d_max: float = 80.0) -> float:
    """Range-adaptive scale ``1 + alpha * d / d_max``."""
    if d < 0:
        raise ValueError("range must be non-negative")
    return 1.0 + alpha * d / d_max


def dilate_polygon(poly, d: float, alpha: float = 2.5, d_max: float = 80.0) -> np.ndarray:
    """Scale ``poly`` about its centroid by ``dilation_scale(d)``."""
    s = dilation_scale(d, alpha, d_max)
    pts = np.asarray(poly, dtype=np.float64)
    c = np.array(polygon_centroid(pts))
    return c + s * (pts - c)


def nms_indices(
    boxes: Sequence[OrientedBevBox],
    scores: Sequence[float],
    class_ids: Sequence[int],
    iou_thresh: float,
    iou_fn: Callable[[OrientedBevBox, OrientedBevBox], float] = rotated_iou,
) -> list[int]:
    """Greedy per-class NMS; returns kept indices in descending-score order.

    Equal scores keep input order. A box is dropped when its IoU with an
    already kept box of the same class is strictly greater than ``iou_thresh``.
    """
    order = sorted(range(len(boxes)), key=lambda i: (-scores[i], i))
    kept: list[int] = []
    kept_by_class: dict[int, list[int]] = {}
    for i in order:
        same = kept_by_class.setdefault(class_ids[i], [])
        if any(iou_fn(boxes[k], boxes[i]) > iou_thresh for k in same):
            continue
        same.append(i)
        kept.append(i)
    return kept


def nms_rotated(dets: Sequence[ScoredBox], iou_thresh: float) -> list[ScoredBox]:
    keep = nms_indices(
        [d.box for d in dets], [d.score for d in dets], [d.class_id for d in dets], iou_thresh
    )
    return [dets[i] for i in keep]
