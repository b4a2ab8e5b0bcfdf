"""Value functions of the detection loss (no gradients, no target assignment)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..errors import EmptyBatch, ShapeMismatch
from ..geometry import OrientedBevBox, rotated_iou

BOX_WEIGHT = 7.5
DFL_WEIGHT = 1.5
CLS_WEIGHT = 0.5


@dataclass
class MatchedPredictions:
    boxes: Sequence[OrientedBevBox]
    dfl_logits: np.ndarray  # (N, 4, bins)
    cls_logits: np.ndarray  # (N, n_classes)


@dataclass
class MatchedTargets:
    boxes: Sequence[OrientedBevBox]
    side_distances: np.ndarray  # (N, 4), continuous, in bin units
    class_ids: np.ndarray  # (N,)


@dataclass(frozen=True)
class LossValues:
    box: float
    dfl: float
    cls: float
    total: float


def weighted_total(l_box: float, l_dfl: float, l_cls: float) -> float:
    return BOX_WEIGHT * l_box + DFL_WEIGHT * l_dfl + CLS_WEIGHT * l_cls


def box_loss(pred: Sequence[OrientedBevBox], gt: Sequence[OrientedBevBox]) -> float:
    return float(np.mean([1.0 - rotated_iou(p, g) for p, g in zip(pred, gt)]))


def dfl_loss(logits: np.ndarray, target: np.ndarray) -> float:
    """Distribution focal loss averaged over all side distances.

    The continuous target ``y`` is split between its two neighbouring bins
    ``floor(y)`` and ``floor(y) + 1`` with linear weights.
    """
    logits = np.asarray(logits, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    bins = logits.shape[-1]
    if logits.shape[:-1] != target.shape:
        raise ShapeMismatch(f"logits {logits.shape} do not match targets {target.shape}")
    if np.any(target < 0) or np.any(target > bins - 1):
        raise ValueError(f"side targets must lie in [0, {bins - 1}]")
    left = np.minimum(np.floor(target), bins - 2).astype(np.int64)
    w_left = (left + 1) - target
    w_right = target - left
    m = logits.max(axis=-1, keepdims=True)
    logp = logits - m - np.log(np.exp(logits - m).sum(axis=-1, keepdims=True))
    lp_left = np.take_along_axis(logp, left[..., None], axis=-1)[..., 0]
    lp_right = np.take_along_axis(logp, (left + 1)[..., None], axis=-1)[..., 0]
    return float(np.mean(-(w_left * lp_left + w_right * lp_right)))


def cls_loss(logits: np.ndarray, class_ids: np.ndarray) -> float:
    """Mean sigmoid cross-entropy against one-hot class targets."""
    logits = np.asarray(logits, dtype=np.float64)
    y = np.zeros_like(logits)
    y[np.arange(len(logits)), np.asarray(class_ids, dtype=np.int64)] = 1.0
    per = np.maximum(logits, 0.0) - logits * y + np.log1p(np.exp(-np.abs(logits)))
    return float(per.mean())


def loss_values(pred: MatchedPredictions, gt: MatchedTargets) -> LossValues:
    n = len(pred.boxes)
    if n == 0:
        raise EmptyBatch("loss needs at least one matched pair")
    if not (len(gt.boxes) == n == len(pred.dfl_logits) == len(pred.cls_logits)
            == len(gt.side_distances) == len(gt.class_ids)):
        raise ShapeMismatch("predictions and targets must have the same length")
    l_box = box_loss(pred.boxes, gt.boxes)
    l_dfl = dfl_loss(pred.dfl_logits, gt.side_distances)
    l_cls = cls_loss(pred.cls_logits, gt.class_ids)
    return LossValues(l_box, l_dfl, l_cls, weighted_total(l_box, l_dfl, l_cls))
