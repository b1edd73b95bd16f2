# Copyright (c) 2025, Crowd Hat Contributors.
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""
Counting, localization and detection metrics.

Localization matches predictions to ground truth on a boolean feasibility
graph (distance below sigma, or IoU at or above a threshold) and takes a
maximum-cardinality matching; scipy's assignment solver maximizing the sum
of the 0/1 matrix yields exactly that.
"""

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Union

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from core import iou_matrix

ArrayList = Union[np.ndarray, Sequence[np.ndarray]]


@dataclass(frozen=True)
class MatchCriterion:
    kind: str = "distance"
    # Distance kind: fixed pixel threshold, or None for half the GT pseudo-box side
    sigma_dist: Optional[float] = None
    iou_thresh: float = 0.5

    def __post_init__(self):
        if self.kind not in ("distance", "box"):
            raise ValueError(f"criterion kind must be 'distance' or 'box', got {self.kind!r}")
        if self.kind == "distance" and self.sigma_dist is not None and not self.sigma_dist > 0:
            raise ValueError(f"sigma_dist must be > 0, got {self.sigma_dist}")
        if self.kind == "box" and not (0.0 < self.iou_thresh < 1.0):
            raise ValueError(f"iou_thresh must be in (0, 1), got {self.iou_thresh}")

    @classmethod
    def distance(cls, sigma: Optional[float] = None) -> "MatchCriterion":
        return cls("distance", sigma_dist=sigma)

    @classmethod
    def box(cls, iou_thresh: float = 0.5) -> "MatchCriterion":
        return cls("box", iou_thresh=iou_thresh)


@dataclass(frozen=True)
class CountReport:
    mae: float
    rmse: float
    per_scene_errors: List[float] = field(default_factory=list)


@dataclass(frozen=True)
class LocReport:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int) -> "LocReport":
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        return cls(int(tp), int(fp), int(fn), precision, recall, f1)


@dataclass(frozen=True)
class SweepLocReport:
    """Precision/recall/F1 averaged over a range of distance thresholds."""
    precision: float
    recall: float
    f1: float
    thresholds: List[float]
    per_threshold: List[LocReport]


def count_metrics(preds: Sequence[float], gts: Sequence[int]) -> CountReport:
    """
    MAE and RMSE of predicted against ground-truth counts.

    Raises:
        ValueError: If the lists differ in length or are empty
    """
    if len(preds) != len(gts):
        raise ValueError(f"length mismatch: {len(preds)} predictions vs {len(gts)} ground truths")
    if len(preds) == 0:
        raise ValueError("count_metrics needs at least one scene")
    errors = np.asarray(preds, dtype=np.float64) - np.asarray(gts, dtype=np.float64)
    mae = float(np.mean(np.abs(errors)))
    rmse = float(np.sqrt(np.mean(errors ** 2)))
    return CountReport(mae, rmse, errors.tolist())


def _as_rows(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.size == 0:
        return np.zeros((0, arr.shape[-1] if arr.ndim == 2 else 2))
    return arr.reshape(len(arr), -1)


def feasibility_matrix(preds: np.ndarray, gts: np.ndarray, criterion: MatchCriterion) -> np.ndarray:
    """Boolean (n_pred, n_gt) matrix of allowed matches."""
    preds, gts = _as_rows(preds), _as_rows(gts)
    if len(preds) == 0 or len(gts) == 0:
        return np.zeros((len(preds), len(gts)), dtype=bool)
    if criterion.kind == "box":
        if preds.shape[1] < 4 or gts.shape[1] < 4:
            raise ValueError("box criterion needs (cx, cy, w, h) rows for predictions and ground truth")
        return iou_matrix(preds[:, :4], gts[:, :4]) >= criterion.iou_thresh
    if criterion.sigma_dist is None:
        if gts.shape[1] < 3:
            raise ValueError("distance criterion without sigma_dist needs ground-truth box sizes")
        sigma = gts[:, 2] / 2.0
    else:
        sigma = np.full(len(gts), criterion.sigma_dist)
    return cdist(preds[:, :2], gts[:, :2]) < sigma[None, :]


def max_matching(adjacency: np.ndarray) -> int:
    """Cardinality of a maximum matching on a boolean bipartite adjacency matrix."""
    if adjacency.size == 0:
        return 0
    rows, cols = linear_sum_assignment(adjacency.astype(np.float64), maximize=True)
    return int(adjacency[rows, cols].sum())


def match_hungarian(preds, gts, criterion: MatchCriterion) -> LocReport:
    """
    Match predictions to ground truth and score the result.

    Args:
        preds: (n, 2) points or (n, >=4) center/size boxes
        gts: (m, 2) points or (m, >=4) boxes (sizes needed by the box kind and
            by the distance kind when sigma_dist is None)
        criterion: Matching rule

    Returns:
        LocReport: TP = matched pairs, FP = unmatched predictions, FN = unmatched ground truth
    """
    preds, gts = _as_rows(preds), _as_rows(gts)
    tp = max_matching(feasibility_matrix(preds, gts, criterion))
    return LocReport.from_counts(tp, len(preds) - tp, len(gts) - tp)


def _scene_list(x: ArrayList) -> List[np.ndarray]:
    if isinstance(x, np.ndarray):
        return [x]
    return [_as_rows(a) for a in x]


def localization_report(preds: ArrayList, gts: ArrayList, criterion: MatchCriterion) -> LocReport:
    """Dataset-level report: TP/FP/FN summed over scenes before computing P/R/F1."""
    tp = fp = fn = 0
    for p, g in zip(_scene_list(preds), _scene_list(gts)):
        r = match_hungarian(p, g, criterion)
        tp, fp, fn = tp + r.tp, fp + r.fp, fn + r.fn
    return LocReport.from_counts(tp, fp, fn)


def eval_localization_qnrf(preds: ArrayList, gts: ArrayList,
                           thresholds: Sequence[float] = tuple(range(1, 101))) -> SweepLocReport:
    """
    Localization evaluated at each distance threshold and averaged.

    Per threshold, TP/FP/FN are summed over scenes; the returned precision,
    recall and F1 are the means of the per-threshold values.
    """
    pred_list, gt_list = _scene_list(preds), _scene_list(gts)
    distances = [cdist(_as_rows(p)[:, :2], _as_rows(g)[:, :2]) if len(p) and len(g) else None
                 for p, g in zip(pred_list, gt_list)]
    reports = []
    for t in thresholds:
        tp = fp = fn = 0
        for p, g, d in zip(pred_list, gt_list, distances):
            matched = max_matching(d < t) if d is not None else 0
            tp += matched
            fp += len(p) - matched
            fn += len(g) - matched
        reports.append(LocReport.from_counts(tp, fp, fn))
    return SweepLocReport(
        precision=float(np.mean([r.precision for r in reports])),
        recall=float(np.mean([r.recall for r in reports])),
        f1=float(np.mean([r.f1 for r in reports])),
        thresholds=[float(t) for t in thresholds],
        per_threshold=reports,
    )


def average_precision(preds: ArrayList, gts: ArrayList, iou_thresh: float = 0.5) -> float:
    """
    Dataset-global average precision at an IoU threshold.

    Predictions from every scene are pooled and visited by score descending;
    each is matched to the highest-IoU unmatched ground truth of its scene
    with IoU >= iou_thresh. AP is the area under the precision envelope
    (all-point interpolation).

    Args:
        preds: Per-scene (n, 5) arrays of [cx, cy, w, h, score]
        gts: Per-scene (m, >=4) arrays of ground-truth boxes

    Raises:
        ValueError: If there are no ground-truth boxes at all
    """
    pred_list, gt_list = _scene_list(preds), _scene_list(gts)
    total_gt = sum(len(g) for g in gt_list)
    if total_gt == 0:
        raise ValueError("average precision is undefined without ground-truth boxes")

    scene_idx = np.concatenate([np.full(len(p), k, dtype=np.int64) for k, p in enumerate(pred_list)] or [np.zeros(0, np.int64)])
    box_idx = np.concatenate([np.arange(len(p)) for p in pred_list] or [np.zeros(0, np.int64)])
    scores = np.concatenate([p[:, 4] for p in pred_list if len(p)] or [np.zeros(0)])
    if len(scores) == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")

    ious = [iou_matrix(p[:, :4], g[:, :4]) if len(p) and len(g) else None for p, g in zip(pred_list, gt_list)]
    matched = [np.zeros(len(g), dtype=bool) for g in gt_list]
    tp = np.zeros(len(order))
    for rank, k in enumerate(order):
        s, b = scene_idx[k], box_idx[k]
        if ious[s] is None:
            continue
        overlap = np.where(matched[s], -1.0, ious[s][b])
        best = int(np.argmax(overlap))
        if overlap[best] >= iou_thresh:
            matched[s][best] = True
            tp[rank] = 1.0

    cum_tp = np.cumsum(tp)
    recall = cum_tp / total_gt
    precision = cum_tp / np.arange(1, len(order) + 1)

    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))
