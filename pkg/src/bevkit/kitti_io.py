"""KITTI object-detection file formats and LiDAR/camera box conversion.

Point clouds are plain ``(N, 4)`` float32 arrays with columns
``x`` (forward), ``y`` (left), ``z`` (up) and reflectance in [0, 1].
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    DegenerateBox,
    MalformedFile,
    MissingKey,
    ParseError,
    ReflectanceOutOfRange,
)
from .geometry import CLASS_NAMES, Box3D, OrientedBevBox, ScoredBox, wrap_angle

POINT_DTYPE = np.dtype("<f4")
RECORD_BYTES = 16


def check_cloud(points: np.ndarray) -> np.ndarray:
    """Validate shape and reflectance range; returns the array unchanged."""
    pts = np.asarray(points)
    if pts.ndim != 2 or pts.shape[1] != 4:
        raise MalformedFile(f"point cloud must have shape (N, 4), got {pts.shape}")
    if len(pts):
        r = pts[:, 3]
        bad = ~((r >= 0.0) & (r <= 1.0))
        if bad.any():
            raise ReflectanceOutOfRange(
                f"{int(bad.sum())} returns with reflectance outside [0, 1] (first: {r[bad][0]!r})"
            )
    return pts


def read_velodyne(path: str | os.PathLike) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) % RECORD_BYTES:
        raise MalformedFile(f"{path}: {len(raw)} bytes is not a multiple of {RECORD_BYTES}")
    pts = np.frombuffer(raw, dtype=POINT_DTYPE).reshape(-1, 4).copy()
    return check_cloud(pts)


def write_velodyne(path: str | os.PathLike, points: np.ndarray) -> None:
    pts = np.ascontiguousarray(np.asarray(points, dtype=POINT_DTYPE).reshape(-1, 4))
    Path(path).write_bytes(pts.tobytes())


@dataclass
class KittiLabel:
    class_name: str
    truncation: float = 0.0
    occlusion: int = 0
    alpha: float = 0.0
    bbox2d: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    dimensions: tuple[float, float, float] = (0.0, 0.0, 0.0)  # h, w, l
    location: tuple[float, float, float] = (0.0, 0.0, 0.0)  # bottom centre, camera frame
    rotation_y: float = 0.0
    score: float | None = None

    @property
    def bbox_height(self) -> float:
        return self.bbox2d[3] - self.bbox2d[1]

    @property
    def has_bbox(self) -> bool:
        l, t, r, b = self.bbox2d
        return r > l and b > t


def _label_from_fields(fields: list[str], lineno: int) -> KittiLabel:
    if len(fields) not in (15, 16):
        raise ParseError(f"expected 15 or 16 fields, got {len(fields)}", lineno)
    try:
        v = [float(x) for x in fields[1:]]
    except ValueError as exc:
        raise ParseError(str(exc), lineno) from None
    occ = v[1]
    if occ != int(occ):
        raise ParseError(f"occlusion must be an integer, got {fields[2]}", lineno)
    lab = KittiLabel(
        class_name=fields[0],
        truncation=v[0],
        occlusion=int(occ),
        alpha=v[2],
        bbox2d=(v[3], v[4], v[5], v[6]),
        dimensions=(v[7], v[8], v[9]),
        location=(v[10], v[11], v[12]),
        rotation_y=v[13],
        score=v[14] if len(v) == 15 else None,
    )
    l, t, r, b = lab.bbox2d
    if r < l or b < t:
        raise ParseError("2D box has right < left or bottom < top", lineno)
    if lab.class_name != "DontCare" and min(lab.dimensions) < 0:
        raise ParseError("negative object dimensions", lineno)
    return lab


def parse_labels(text: str) -> list[KittiLabel]:
    labels = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        fields = line.split()
        if fields:
            labels.append(_label_from_fields(fields, lineno))
    return labels


def read_labels(path: str | os.PathLike) -> list[KittiLabel]:
    return parse_labels(Path(path).read_text())


def format_label(lab: KittiLabel) -> str:
    l, t, r, b = lab.bbox2d
    h, w, ln = lab.dimensions
    x, y, z = lab.location
    parts = [
        lab.class_name,
        f"{lab.truncation:.2f}",
        str(int(lab.occlusion)),
        f"{lab.alpha:.2f}",
        f"{l:.2f}", f"{t:.2f}", f"{r:.2f}", f"{b:.2f}",
        f"{h:.2f}", f"{w:.2f}", f"{ln:.2f}",
        f"{x:.2f}", f"{y:.2f}", f"{z:.2f}",
        f"{lab.rotation_y:.2f}",
    ]
    if lab.score is not None:
        parts.append(f"{lab.score:.2f}")
    return " ".join(parts)


def write_detections(dets: Sequence[KittiLabel], path: str | os.PathLike) -> None:
    """Write detections highest score first; ties keep input order."""
    for d in dets:
        if d.score is None or not 0.0 <= d.score <= 1.0:
            raise ValueError(f"detection score must be in [0, 1], got {d.score}")
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    lines = [format_label(dets[i]) + "\n" for i in order]
    Path(path).write_text("".join(lines))


@dataclass
class Calibration:
    P2: np.ndarray = field(default_factory=lambda: np.hstack([np.eye(3), np.zeros((3, 1))]))
    R0_rect: np.ndarray = field(default_factory=lambda: np.eye(3))
    Tr_velo_to_cam: np.ndarray = field(default_factory=lambda: np.hstack([np.eye(3), np.zeros((3, 1))]))

    def __post_init__(self):
        self.P2 = np.asarray(self.P2, dtype=np.float64).reshape(3, 4)
        self.R0_rect = np.asarray(self.R0_rect, dtype=np.float64).reshape(3, 3)
        self.Tr_velo_to_cam = np.asarray(self.Tr_velo_to_cam, dtype=np.float64).reshape(3, 4)

    def is_orthonormal(self, tol: float = 1e-4) -> bool:
        i3 = np.eye(3)
        rot = self.Tr_velo_to_cam[:, :3]
        return bool(
            np.abs(self.R0_rect @ self.R0_rect.T - i3).max() <= tol
            and np.abs(rot @ rot.T - i3).max() <= tol
        )

    def velo_to_rect(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        cam = pts[:, :3] @ self.Tr_velo_to_cam[:, :3].T + self.Tr_velo_to_cam[:, 3]
        return cam @ self.R0_rect.T

    def rect_to_velo(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        cam = np.linalg.solve(self.R0_rect, pts[:, :3].T).T
        rot, t = self.Tr_velo_to_cam[:, :3], self.Tr_velo_to_cam[:, 3]
        return np.linalg.solve(rot, (cam - t).T).T

    def project_rect(self, pts: np.ndarray) -> np.ndarray:
        """Project rectified-camera points with P2; returns (N, 3) as (u, v, depth)."""
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        hom = np.hstack([pts, np.ones((len(pts), 1))]) @ self.P2.T
        depth = hom[:, 2:3]
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = hom[:, :2] / depth
        return np.hstack([uv, depth])


_CALIB_SHAPES = {"P2": (3, 4), "R0_rect": (3, 3), "Tr_velo_to_cam": (3, 4)}


def parse_calib(text: str) -> Calibration:
    values: dict[str, list[float]] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        key, sep, rest = line.partition(":")
        if not sep:
            raise ParseError("expected 'KEY: values'", lineno)
        try:
            values[key.strip()] = [float(x) for x in rest.split()]
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
    mats = {}
    for key, shape in _CALIB_SHAPES.items():
        if key not in values:
            raise MissingKey(key)
        n = shape[0] * shape[1]
        if len(values[key]) != n:
            raise ParseError(f"{key} needs {n} values, got {len(values[key])}")
        mats[key] = np.array(values[key]).reshape(shape)
    return Calibration(**mats)


def read_calib(path: str | os.PathLike) -> Calibration:
    return parse_calib(Path(path).read_text())


def format_calib(calib: Calibration) -> str:
    lines = []
    for key in _CALIB_SHAPES:
        vals = getattr(calib, key).ravel()
        lines.append(f"{key}: " + " ".join(repr(float(v)) for v in vals))
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class CameraBox:
    """Camera-frame box geometry in KITTI conventions."""

    dimensions: tuple[float, float, float]  # h, w, l
    location: tuple[float, float, float]  # bottom-face centre
    rotation_y: float


def lidar_box_to_camera(box: Box3D, calib: Calibration) -> CameraBox:
    fp = box.footprint
    h = box.z_top - box.z_bottom
    if not (fp.w > 0 and fp.l > 0 and h > 0):
        raise DegenerateBox(f"non-positive extent in {box}")
    loc = calib.velo_to_rect([[fp.cx, fp.cy, box.z_bottom]])[0]
    ry = wrap_angle(-fp.yaw - math.pi / 2)
    return CameraBox((h, fp.w, fp.l), (float(loc[0]), float(loc[1]), float(loc[2])), ry)


def camera_box_to_lidar(cam: CameraBox, calib: Calibration) -> Box3D:
    h, w, l = cam.dimensions
    if not (h > 0 and w > 0 and l > 0):
        raise DegenerateBox(f"non-positive extent in {cam}")
    x, y, z = calib.rect_to_velo([cam.location])[0]
    yaw = wrap_angle(-cam.rotation_y - math.pi / 2)
    return Box3D(OrientedBevBox(float(x), float(y), w, l, yaw), float(z), float(z) + h)


def box_corners_3d(box: Box3D) -> np.ndarray:
    """Eight LiDAR-frame corners: bottom face then top face."""
    from .geometry import box_polygon

    poly = box_polygon(box.footprint)
    bottom = np.hstack([poly, np.full((4, 1), box.z_bottom)])
    top = np.hstack([poly, np.full((4, 1), box.z_top)])
    return np.vstack([bottom, top])


def detection_label(
    box: Box3D,
    calib: Calibration,
    class_name: str,
    score: float,
) -> KittiLabel:
    """Build a KITTI result line for a LiDAR-frame box.

    The 2D box is the P2 projection of the eight corners; it is left as
    zeros when any corner lies behind the image plane.
    """
    cam = lidar_box_to_camera(box, calib)
    corners = calib.velo_to_rect(box_corners_3d(box))
    proj = calib.project_rect(corners)
    if np.all(proj[:, 2] > 1e-3) and np.all(np.isfinite(proj[:, :2])):
        bbox = (
            float(proj[:, 0].min()), float(proj[:, 1].min()),
            float(proj[:, 0].max()), float(proj[:, 1].max()),
        )
    else:
        bbox = (0.0, 0.0, 0.0, 0.0)
    x, _, z = cam.location
    alpha = wrap_angle(cam.rotation_y - math.atan2(x, z))
    return KittiLabel(
        class_name=class_name,
        truncation=0.0,
        occlusion=0,
        alpha=alpha,
        bbox2d=bbox,
        dimensions=cam.dimensions,
        location=cam.location,
        rotation_y=cam.rotation_y,
        score=float(score),
    )


def format_bev_detection(det: ScoredBox) -> str:
    """``class score cx cy w l yaw`` with the footprint in LiDAR metres."""
    b = det.box
    name = CLASS_NAMES[det.class_id]
    return f"{name} {det.score:.6f} {b.cx:.6f} {b.cy:.6f} {b.w:.6f} {b.l:.6f} {b.yaw:.6f}"


def parse_bev_detections(text: str) -> list[ScoredBox]:
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) != 7 or fields[0] not in CLASS_NAMES:
            raise ParseError("expected: class score cx cy w l yaw", lineno)
        try:
            score, cx, cy, w, l, yaw = (float(v) for v in fields[1:])
            out.append(ScoredBox(OrientedBevBox(cx, cy, w, l, yaw), score, CLASS_NAMES.index(fields[0])))
        except (ValueError, DegenerateBox) as exc:
            raise ParseError(str(exc), lineno) from None
    return out


def write_bev_detections(dets: Sequence[ScoredBox], path: str | os.PathLike) -> None:
    Path(path).write_text("".join(format_bev_detection(d) + "\n" for d in dets))


def read_bev_detections(path: str | os.PathLike) -> list[ScoredBox]:
    return parse_bev_detections(Path(path).read_text())
