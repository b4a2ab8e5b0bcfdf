import math
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from synthetic import KITTI_CALIB

from bevkit.errors import MalformedFile, MissingKey, ParseError, ReflectanceOutOfRange
from bevkit.geometry import Box3D, OrientedBevBox, ScoredBox
from bevkit.kitti_io import (
    Calibration,
    CameraBox,
    KittiLabel,
    camera_box_to_lidar,
    detection_label,
    format_calib,
    lidar_box_to_camera,
    parse_bev_detections,
    parse_calib,
    parse_labels,
    read_bev_detections,
    read_calib,
    read_labels,
    read_velodyne,
    write_bev_detections,
    write_detections,
    write_velodyne,
)

CAR_LINE = "Car 0.00 0 -1.58 587.01 173.33 614.12 200.12 1.65 1.67 3.64 -0.65 1.71 46.70 -1.59"


# -- velodyne ---------------------------------------------------------------

def test_single_record(tmp_path):
    p = tmp_path / "a.bin"
    p.write_bytes(struct.pack("<4f", 1.0, 2.0, 0.5, 0.3))
    pts = read_velodyne(p)
    assert pts.shape == (1, 4)
    np.testing.assert_array_equal(pts[0], np.float32([1.0, 2.0, 0.5, 0.3]))


def test_empty_file(tmp_path):
    p = tmp_path / "e.bin"
    p.write_bytes(b"")
    assert read_velodyne(p).shape == (0, 4)


def test_bad_length(tmp_path):
    p = tmp_path / "b.bin"
    p.write_bytes(b"\0" * 33)
    with pytest.raises(MalformedFile):
        read_velodyne(p)


def test_reflectance_rejected(tmp_path):
    p = tmp_path / "r.bin"
    p.write_bytes(struct.pack("<4f", 1.0, 2.0, 0.5, 1.5))
    with pytest.raises(ReflectanceOutOfRange):
        read_velodyne(p)


def test_velodyne_round_trip(tmp_path):
    pts = np.random.default_rng(0).uniform(0, 1, (50, 4)).astype(np.float32)
    write_velodyne(tmp_path / "x.bin", pts)
    np.testing.assert_array_equal(read_velodyne(tmp_path / "x.bin"), pts)


@given(st.binary(max_size=16 * 8).filter(lambda b: len(b) % 16 == 0))
def test_velodyne_total_on_aligned_files(tmp_path_factory, raw):
    p = tmp_path_factory.mktemp("v") / "f.bin"
    p.write_bytes(raw)
    try:
        pts = read_velodyne(p)
    except ReflectanceOutOfRange:
        return
    assert pts.shape == (len(raw) // 16, 4)


# -- labels ---------------------------------------------------------------

def test_label_field_mapping():
    (lab,) = parse_labels(CAR_LINE)
    assert lab.class_name == "Car"
    assert lab.dimensions == (1.65, 1.67, 3.64)
    assert lab.rotation_y == -1.59
    assert lab.location == (-0.65, 1.71, 46.70)
    assert lab.bbox2d == (587.01, 173.33, 614.12, 200.12)
    assert lab.score is None


def test_label_with_score_and_dontcare():
    text = CAR_LINE + " 0.87\n\nDontCare -1 -1 -10 503.89 169.71 590.61 190.13 -1 -1 -1 -1000 -1000 -1000 -10\n"
    labs = parse_labels(text)
    assert [l.class_name for l in labs] == ["Car", "DontCare"]
    assert labs[0].score == pytest.approx(0.87)


def test_empty_label_file(tmp_path):
    (tmp_path / "l.txt").write_text("")
    assert read_labels(tmp_path / "l.txt") == []


def test_label_wrong_field_count_reports_line():
    with pytest.raises(ParseError) as ei:
        parse_labels(CAR_LINE + "\n" + " ".join(CAR_LINE.split()[:14]))
    assert ei.value.line == 2


# -- calibration ---------------------------------------------------------------

CALIB_TEXT = """P0: 1 0 0 0 0 1 0 0 0 0 1 0
P2: 1 2 3 4 5 6 7 8 9 10 11 12
R0_rect: 1 0 0 0 1 0 0 0 1
Tr_velo_to_cam: 1 0 0 0 0 1 0 0 0 0 1 0
"""


def test_calib_row_major(tmp_path):
    (tmp_path / "c.txt").write_text(CALIB_TEXT)
    c = read_calib(tmp_path / "c.txt")
    np.testing.assert_array_equal(c.P2, np.arange(1, 13).reshape(3, 4))
    np.testing.assert_array_equal(c.R0_rect, np.eye(3))
    assert c.is_orthonormal()


def test_calib_missing_key():
    text = "\n".join(l for l in CALIB_TEXT.splitlines() if not l.startswith("Tr_velo"))
    with pytest.raises(MissingKey):
        parse_calib(text)


def test_calib_round_trip():
    c = parse_calib(format_calib(KITTI_CALIB))
    np.testing.assert_allclose(c.P2, KITTI_CALIB.P2)
    np.testing.assert_allclose(c.Tr_velo_to_cam, KITTI_CALIB.Tr_velo_to_cam)


# -- frame conversion ------------------------------------------------------------

def test_identity_calib_box():
    box = Box3D(OrientedBevBox(10.0, 0.0, 1.6, 3.9, 0.0), 0.0, 1.5)
    cam = lidar_box_to_camera(box, Calibration())
    np.testing.assert_allclose(cam.location, (10.0, 0.0, 0.0), atol=1e-12)
    assert cam.rotation_y == pytest.approx(-math.pi / 2)
    assert cam.dimensions == pytest.approx((1.5, 1.6, 3.9))


def test_yaw_minus_half_pi_gives_zero():
    box = Box3D(OrientedBevBox(5.0, 1.0, 1.0, 2.0, -math.pi / 2), -1.0, 0.5)
    assert lidar_box_to_camera(box, Calibration()).rotation_y == pytest.approx(0.0, abs=1e-12)


def _random_calib(rng) -> Calibration:
    def rot(rng):
        q, r = np.linalg.qr(rng.standard_normal((3, 3)))
        return q * np.sign(np.diag(r))

    Tr = np.hstack([rot(rng) @ KITTI_CALIB.Tr_velo_to_cam[:, :3], rng.uniform(-1, 1, (3, 1))])
    return Calibration(P2=KITTI_CALIB.P2, R0_rect=rot(rng), Tr_velo_to_cam=Tr)


def test_lidar_camera_round_trip_random():
    rng = np.random.default_rng(3)
    calibs = [_random_calib(rng) for _ in range(10)]
    for c in calibs:
        assert c.is_orthonormal()
    for i in range(1000):
        calib = calibs[i % 10]
        fp = OrientedBevBox(rng.uniform(0, 70), rng.uniform(-40, 40), rng.uniform(0.3, 3),
                            rng.uniform(0.3, 6), rng.uniform(-math.pi, math.pi))
        zb = rng.uniform(-3, 0)
        box = Box3D(fp, zb, zb + rng.uniform(0.5, 3))
        cam = lidar_box_to_camera(box, calib)
        back = camera_box_to_lidar(cam, calib)
        assert back.footprint.cx == pytest.approx(fp.cx, abs=1e-6)
        assert back.footprint.cy == pytest.approx(fp.cy, abs=1e-6)
        assert back.z_bottom == pytest.approx(zb, abs=1e-6)
        again = lidar_box_to_camera(back, calib)
        np.testing.assert_allclose(again.location, cam.location, atol=1e-6)
        assert abs(math.remainder(again.rotation_y - cam.rotation_y, 2 * math.pi)) < 1e-9


def test_camera_round_trip_under_kitti_calib():
    cam = CameraBox((1.5, 1.6, 3.9), (2.0, 1.65, 20.0), 0.3)
    box = camera_box_to_lidar(cam, KITTI_CALIB)
    back = lidar_box_to_camera(box, KITTI_CALIB)
    np.testing.assert_allclose(back.location, cam.location, atol=1e-6)
    assert back.rotation_y == pytest.approx(0.3, abs=1e-9)


# -- detection output -------------------------------------------------------------

def _det(score, x=10.0):
    box = Box3D(OrientedBevBox(x, 0.0, 1.6, 3.9, 0.2), -1.73, -0.23)
    return detection_label(box, KITTI_CALIB, "Car", score)


def test_write_detections_format(tmp_path):
    write_detections([_det(0.9)], tmp_path / "d.txt")
    lines = (tmp_path / "d.txt").read_text().splitlines()
    assert len(lines) == 1
    fields = lines[0].split()
    assert len(fields) == 16 and fields[-1] == "0.90"


def test_write_detections_empty_and_order(tmp_path):
    write_detections([], tmp_path / "e.txt")
    assert (tmp_path / "e.txt").read_text() == ""
    write_detections([_det(0.3, 10.0), _det(0.8, 20.0)], tmp_path / "o.txt")
    assert [l.split()[-1] for l in (tmp_path / "o.txt").read_text().splitlines()] == ["0.80", "0.30"]


def test_write_detections_rejects_bad_score(tmp_path):
    with pytest.raises(ValueError):
        write_detections([KittiLabel("Car", score=1.5)], tmp_path / "x.txt")


@given(st.lists(st.tuples(
    st.floats(-50, 50), st.floats(-3, 3), st.floats(1, 80), st.floats(0.3, 5), st.floats(-3.1, 3.1),
    st.floats(0, 1)), max_size=6))
def test_write_parse_round_trip(tmp_path_factory, rows):
    labs = [KittiLabel("Car", 0.0, 0, 0.1, (1.0, 2.0, 30.0, 40.0), (h, 1.6, 3.9), (x, y, z), ry, s)
            for x, y, z, h, ry, s in rows]
    p = tmp_path_factory.mktemp("w") / "d.txt"
    write_detections(labs, p)
    back = read_labels(p)
    order = sorted(range(len(labs)), key=lambda i: (-labs[i].score, i))
    for i, b in zip(order, back):
        a = labs[i]
        assert np.allclose(a.location, b.location, atol=0.005 + 1e-9)
        assert np.allclose(a.dimensions, b.dimensions, atol=0.005 + 1e-9)
        assert abs(a.rotation_y - b.rotation_y) <= 0.005 + 1e-9


def test_detection_label_projects_bbox():
    lab = _det(0.5)
    l, t, r, b = lab.bbox2d
    assert r > l and b > t
    assert lab.alpha == pytest.approx(
        math.remainder(lab.rotation_y - math.atan2(lab.location[0], lab.location[2]), 2 * math.pi), abs=1e-9)


def test_bev_detection_round_trip(tmp_path):
    dets = [ScoredBox(OrientedBevBox(12.5, -3.25, 1.6, 3.9, 0.4), 0.75, 0),
            ScoredBox(OrientedBevBox(30.0, 8.0, 0.6, 0.8, -2.0), 0.5, 1)]
    write_bev_detections(dets, tmp_path / "b.txt")
    back = read_bev_detections(tmp_path / "b.txt")
    assert [d.class_id for d in back] == [0, 1]
    assert back[0].box.cx == pytest.approx(12.5) and back[1].box.yaw == pytest.approx(-2.0)


def test_bev_detection_parse_errors():
    with pytest.raises(ParseError):
        parse_bev_detections("Truck 0.5 1 2 3 4 0")
    with pytest.raises(ParseError):
        parse_bev_detections("Car 0.5 1 2 -3 4 0")
