import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import percentile_tukey
from synthetic import GROUND_Z, box_points, ground_points

from bevkit.box_recovery import (
    RecoveryParams,
    SortedCloud,
    estimate_extent,
    inside_polygon,
    points_in_polygon,
    recover,
    recover_boxes,
    tukey_fence,
    tukey_inliers,
)
from bevkit.errors import EmptyInput, NoSupportingPoints
from bevkit.geometry import Box3D, OrientedBevBox, ScoredBox, box_polygon
from bevkit.kitti_io import Calibration, CameraBox, camera_box_to_lidar
from bevkit.net.head import DecodedDetection

finite = st.floats(-1e3, 1e3, allow_nan=False)


# -- containment ----------------------------------------------------------------

def test_edges_and_vertices_are_inside():
    poly = box_polygon(OrientedBevBox(0, 0, 2, 2))
    pts = np.array([[1, 0], [1, 1], [0, -1], [0, 0], [1.001, 0], [0, 1.2]])
    assert inside_polygon(pts, poly).tolist() == [True, True, True, True, False, False]


@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-math.pi, math.pi))
def test_containment_matches_local_frame(px, py, yaw):
    b = OrientedBevBox(0.5, -0.2, 1.5, 2.5, yaw)
    dx, dy = px - b.cx, py - b.cy
    lon = math.cos(yaw) * dx + math.sin(yaw) * dy
    lat = -math.sin(yaw) * dx + math.cos(yaw) * dy
    margin = min(b.l / 2 - abs(lon), b.w / 2 - abs(lat))
    if abs(margin) < 1e-7:
        return
    assert bool(inside_polygon([[px, py]], box_polygon(b))[0]) == (margin > 0)


def test_sorted_cloud_matches_full_scan():
    rng = np.random.default_rng(0)
    cloud = np.column_stack([rng.uniform(0, 20, (5000, 3)), rng.uniform(0, 1, 5000)])
    idx = SortedCloud(cloud)
    for _ in range(50):
        poly = box_polygon(OrientedBevBox(*rng.uniform(2, 18, 2), *rng.uniform(0.5, 5, 2), rng.uniform(-3, 3)))
        assert sorted(idx.z_in(poly)) == sorted(points_in_polygon(cloud, poly))
    assert len(points_in_polygon(np.zeros((0, 4)), poly)) == 0


# -- Tukey fence -----------------------------------------------------------------

def test_tukey_examples():
    assert tukey_inliers([1, 2, 3, 4, 100]) == [1, 2, 3, 4]
    assert tukey_inliers([5.0] * 7) == [5.0] * 7
    assert tukey_inliers([3.0]) == [3.0]
    assert tukey_fence([1, 2, 3, 4, 5]) == (-1.0, 7.0)
    with pytest.raises(EmptyInput):
        tukey_fence([])


@given(st.lists(finite, min_size=1, max_size=30), st.floats(0.5, 3))
def test_tukey_matches_numpy(x, k):
    assert tukey_inliers(x, k) == percentile_tukey(x, k)


@given(st.lists(finite, min_size=1, max_size=30))
def test_tukey_subset_and_nonempty(x):
    out = tukey_inliers(x)
    assert out and set(out) <= {float(v) for v in x}


@given(st.lists(finite, min_size=1, max_size=30), st.floats(0.1, 3), st.floats(0, 3))
def test_tukey_monotone_in_k(x, k, extra):
    assert len(tukey_inliers(x, k)) <= len(tukey_inliers(x, k + extra))


def test_tukey_not_idempotent():
    """A second pass can tighten the fence: the quartiles move once 100 is gone."""
    x = [0, 0, 0, 0, 0, 0, 0, 1, 2, 100]
    once = tukey_inliers(x)
    assert once == [0] * 7 + [1]
    assert tukey_inliers(once) == [0] * 7


# -- extent estimation ---------------------------------------------------------------

FP = OrientedBevBox(12.0, 3.0, 1.6, 3.9, 0.4)


def _car(seed=0, z=(-1.7, -0.2), n=400):
    rng = np.random.default_rng(seed)
    return box_points(Box3D(FP, *z), n, rng)


def test_high_outlier_rejected():
    cloud = np.vstack([_car(), [[FP.cx, FP.cy, 3.0, 0.5]]])
    ext = estimate_extent(cloud, FP)
    assert not ext.used_prior
    assert ext.z_top == pytest.approx(-0.2, abs=0.02)
    assert ext.z_top - ext.z_bottom == pytest.approx(1.5, abs=0.03)


def test_low_outlier_rejected():
    cloud = np.vstack([_car(1), [[FP.cx + 0.2, FP.cy, -4.0, 0.5]]])
    ext = estimate_extent(cloud, FP)
    assert not ext.used_prior
    assert ext.z_bottom == pytest.approx(-1.7, abs=0.02)


def test_short_span_uses_prior():
    ext = estimate_extent(_car(2, z=(-1.7, -1.2)), FP)
    assert ext.used_prior
    assert ext.z_top == ext.z_bottom + 1.6


def test_tall_span_uses_prior():
    ext = estimate_extent(_car(3, z=(-1.7, 1.0)), FP)
    assert ext.used_prior and ext.z_top - ext.z_bottom == pytest.approx(1.6, abs=1e-9)


def test_no_points():
    with pytest.raises(NoSupportingPoints):
        estimate_extent(np.zeros((0, 4)), FP)


def test_bottom_uses_dilated_footprint():
    """Ground just outside the footprint but inside its dilation sets the bottom."""
    far = OrientedBevBox(60.0, 0.0, 1.6, 3.9, 0.0)
    rng = np.random.default_rng(4)
    body = box_points(Box3D(far, -1.2, 0.3), 200, rng)
    ring = np.array([[60.0, 1.5, GROUND_Z, 0.1]] * 3)  # 0.7 m outside the side
    ext = estimate_extent(np.vstack([body, ring]), far)
    assert ext.z_bottom == pytest.approx(GROUND_Z)
    assert ext.z_top == pytest.approx(0.3)


def test_params_validation():
    with pytest.raises(ValueError):
        RecoveryParams(h_min=2.5)
    with pytest.raises(ValueError):
        RecoveryParams(alpha=0)


@given(st.integers(0, 10_000))
def test_prior_flag_iff_default_height(seed):
    rng = np.random.default_rng(seed)
    top = rng.uniform(-1.5, 1.5)
    ext = estimate_extent(_car(seed, z=(-1.7, top), n=60), FP)
    if ext.used_prior:
        assert ext.z_top - ext.z_bottom == pytest.approx(1.6, abs=1e-9)
    else:
        assert 1.25 <= ext.z_top - ext.z_bottom <= 2.1


# -- full recovery ------------------------------------------------------------------

def _planted_scene(seed):
    rng = np.random.default_rng(seed)
    boxes = [Box3D(OrientedBevBox(15.0, -4.0, 1.6, 3.9, 0.3), GROUND_Z, GROUND_Z + 1.5),
             Box3D(OrientedBevBox(30.0, 6.0, 0.6, 0.8, -1.0), GROUND_Z, GROUND_Z + 1.75),
             Box3D(OrientedBevBox(45.0, -12.0, 0.6, 1.7, 2.0), GROUND_Z, GROUND_Z + 1.7)]
    cloud = np.vstack([ground_points(4000, rng, (0, 70), (-40, 40))] + [box_points(b, 300, rng) for b in boxes])
    return cloud, boxes


def test_recovery_reproduces_planted_boxes():
    cloud, boxes = _planted_scene(0)
    dets = [DecodedDetection.from_footprint(b.footprint, i, 0.9 - 0.1 * i) for i, b in enumerate(boxes)]
    labels = recover(dets, cloud, Calibration())
    assert [l.class_name for l in labels] == ["Car", "Pedestrian", "Cyclist"]
    for lab, b in zip(labels, boxes):
        got = camera_box_to_lidar(CameraBox(lab.dimensions, lab.location, lab.rotation_y), Calibration())
        assert got.z_bottom == pytest.approx(b.z_bottom, abs=0.05)
        assert got.z_top == pytest.approx(b.z_top, abs=0.05)
        assert got.footprint.cx == pytest.approx(b.footprint.cx, abs=1e-6)
        assert lab.score == pytest.approx(0.9 - 0.1 * labels.index(lab))


def test_unsupported_detection_dropped():
    cloud, boxes = _planted_scene(1)
    cloud = cloud[cloud[:, 0] < 65]
    dets = [ScoredBox(boxes[0].footprint, 0.8, 0), ScoredBox(OrientedBevBox(68.0, 39.0, 0.2, 0.2), 0.7, 0)]
    labels = recover_boxes(dets, cloud, Calibration())
    assert len(labels) == 1
