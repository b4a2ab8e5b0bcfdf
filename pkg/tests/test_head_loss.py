import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bevkit.bev_encoder import GridConfig
from bevkit.errors import EmptyBatch, ShapeMismatch
from bevkit.geometry import OrientedBevBox, rotated_iou
from bevkit.net.head import (
    DecodedDetection,
    angle_bin_centers,
    decode_angle,
    detection_scores,
    dfl_expectation,
    head_decode,
)
from bevkit.net.loss import (
    MatchedPredictions,
    MatchedTargets,
    box_loss,
    cls_loss,
    dfl_loss,
    loss_values,
    weighted_total,
)

# -- decoding ---------------------------------------------------------------------

def test_uniform_dfl_is_midpoint():
    assert dfl_expectation(np.zeros(16)) == pytest.approx(7.5)


def test_one_hot_dfl():
    logits = np.full(16, -20.0)
    logits[3] = 20.0
    assert dfl_expectation(logits) == pytest.approx(3.0, abs=1e-3)


def test_zero_logits_score():
    s, best = detection_scores(np.zeros((2, 2)), np.zeros((4, 2, 2)))
    np.testing.assert_allclose(s, 0.25)
    assert (best == 0).all()


def test_angle_bins():
    c = angle_bin_centers(4)
    np.testing.assert_allclose(c, [-3 * math.pi / 4, -math.pi / 4, math.pi / 4, 3 * math.pi / 4])
    logits = np.full(4, -30.0)
    logits[2] = 30.0
    assert decode_angle(logits) == pytest.approx(math.pi / 4, abs=1e-9)


def _outputs(h=4, w=4, bins=8, n_ang=8, peak=(1, 2)):
    out = {
        "dfl": np.full((4, bins, h, w), -30.0),
        "cls": np.full((4, h, w), -30.0),
        "obj": np.full((h, w), -30.0),
        "ang": np.zeros((n_ang, h, w)),
    }
    r, c = peak
    out["dfl"][:, 2, r, c] = 30.0  # every side two bins
    out["cls"][1, r, c] = 30.0
    out["obj"][r, c] = 30.0
    out["ang"][:, r, c] = -30.0
    out["ang"][n_ang // 2, r, c] = 30.0  # centre pi/8 for 8 bins
    return out


def test_head_decode_single_peak():
    dets = head_decode({"L": _outputs()}, {"L": 4}, (16, 16))
    assert len(dets) == 1
    d = dets[0]
    assert d.class_id == 1 and d.score == pytest.approx(1.0)
    grid = GridConfig(x_range=(0.0, 1.6), y_range=(-0.8, 0.8))
    fp = d.footprint(grid)
    # centre cell (1, 2) at stride 4 -> pixel (10, 6) -> metric (1.0, -0.2)
    assert (fp.cx, fp.cy) == pytest.approx((1.0, -0.2), abs=1e-9)
    assert (fp.w, fp.l) == pytest.approx((1.6, 1.6), abs=1e-6)
    assert fp.yaw == pytest.approx(math.pi / 8, abs=1e-6)


def test_head_decode_threshold_and_cap():
    out = _outputs()
    assert head_decode({"L": out}, {"L": 4}, (16, 16), conf_thresh=1.01) == []
    out["obj"][:] = 30.0
    out["cls"][0] = 30.0
    out["dfl"][:, 2] = 30.0
    assert len(head_decode({"L": out}, {"L": 4}, (16, 16), max_candidates=5)) == 5


def test_padding_centres_dropped():
    out = _outputs(peak=(3, 3))
    assert head_decode({"L": out}, {"L": 4}, (12, 12)) == []


@given(st.floats(1, 60), st.floats(-35, 35), st.floats(0.3, 4), st.floats(0.3, 6), st.floats(-3.1, 3.1))
def test_footprint_round_trip(cx, cy, w, l, yaw):
    b = OrientedBevBox(cx, cy, w, l, yaw)
    back = DecodedDetection.from_footprint(b, 0, 0.5).footprint()
    assert (back.cx, back.cy, back.w, back.l) == pytest.approx((cx, cy, w, l), abs=1e-9)
    assert abs(math.remainder(back.yaw - yaw, 2 * math.pi)) < 1e-9


# -- loss ---------------------------------------------------------------------------

BOX = OrientedBevBox(5, 1, 1.6, 3.9, 0.3)


def _perfect():
    dfl = np.full((1, 4, 16), -40.0)
    dfl[0, :, 5] = 40.0
    cls = np.full((1, 4), -40.0)
    cls[0, 2] = 40.0
    return (MatchedPredictions([BOX], dfl, cls),
            MatchedTargets([BOX], np.full((1, 4), 5.0), np.array([2])))


def test_perfect_prediction():
    lv = loss_values(*_perfect())
    assert lv.box == pytest.approx(0.0, abs=1e-12)
    assert 0.0 <= lv.dfl < 1e-3 and 0.0 <= lv.cls < 1e-3


def test_disjoint_boxes():
    assert box_loss([BOX], [OrientedBevBox(50, 1, 1.6, 3.9)]) == 1.0


def test_weights():
    assert weighted_total(1.0, 1.0, 1.0) == pytest.approx(9.5)
    assert weighted_total(1.0, 0.0, 0.0) == 7.5


def test_dfl_split_target():
    logits = np.log(np.array([[0.1, 0.6, 0.3]]))
    want = -(0.75 * math.log(0.6) + 0.25 * math.log(0.3))
    assert dfl_loss(logits, np.array([1.25])) == pytest.approx(want)
    with pytest.raises(ValueError):
        dfl_loss(logits, np.array([2.5]))
    with pytest.raises(ShapeMismatch):
        dfl_loss(logits, np.array([1.0, 1.0]))


def test_cls_loss_zero_logits():
    assert cls_loss(np.zeros((3, 4)), np.array([0, 1, 2])) == pytest.approx(math.log(2))


def test_loss_validation():
    p, g = _perfect()
    with pytest.raises(EmptyBatch):
        loss_values(MatchedPredictions([], np.zeros((0, 4, 16)), np.zeros((0, 4))),
                    MatchedTargets([], np.zeros((0, 4)), np.zeros(0)))
    with pytest.raises(ShapeMismatch):
        loss_values(p, MatchedTargets([BOX, BOX], g.side_distances, g.class_ids))


@pytest.mark.parametrize("dx", [0.1, 0.25, 0.5, 0.8])
def test_total_finite_difference(dx):
    """Central differences of L_total in a box shift agree with the closed form
    7.5 * d/dx (1 - (1-dx)/(1+dx)) for two unit squares."""
    p, g = _perfect()
    ref = OrientedBevBox(0, 0, 1, 1)
    g.boxes = [ref]

    def total(x):
        p.boxes = [OrientedBevBox(x, 0, 1, 1)]
        return loss_values(p, g).total

    h = 1e-5
    num = (total(dx + h) - total(dx - h)) / (2 * h)
    exact = 7.5 * 2 / (1 + dx) ** 2
    assert num == pytest.approx(exact, rel=1e-3)
    assert 1 - rotated_iou(OrientedBevBox(dx, 0, 1, 1), ref) == pytest.approx(2 * dx / (1 + dx))
