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
Greedy NMS, region-adaptive NMS and the per-region threshold search.

Regions are the K x K grid cells of the image, indexed x-bin + K * y-bin;
a detection belongs to the region holding its center.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from core import SceneRecord, as_box_array, iou_matrix, sigmoid
from metrics import MatchCriterion, match_hungarian
from synth import pseudo_box_array

logger = logging.getLogger("CrowdHat.nms")

DEFAULT_CONF_FLOOR = 0.3
DEFAULT_SEARCH_STEP = 0.01


@dataclass(frozen=True)
class RegionThresholds:
    K: int
    values: Tuple[float, ...]

    def __post_init__(self):
        if len(self.values) != self.K * self.K:
            raise ValueError(f"expected {self.K * self.K} thresholds, got {len(self.values)}")
        if any(not (0.0 <= v <= 1.0) for v in self.values):
            raise ValueError(f"thresholds must lie in [0, 1], got {self.values}")

    @classmethod
    def from_array(cls, K: int, values) -> "RegionThresholds":
        return cls(K, tuple(float(v) for v in np.asarray(values).reshape(-1)))

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)


def _greedy_keep(iou: np.ndarray, order: np.ndarray, threshold: float) -> np.ndarray:
    """Indices (into order) kept by greedy NMS on a precomputed IoU matrix."""
    n = len(order)
    suppressed = np.zeros(n, dtype=bool)
    keep = []
    for pos in range(n):
        if suppressed[pos]:
            continue
        keep.append(pos)
        suppressed |= iou[pos] > threshold
    return np.asarray(keep, dtype=np.int64)


def _sorted_candidates(boxes: np.ndarray, conf_floor: float) -> np.ndarray:
    """Row indices surviving the confidence floor, by score descending (stable)."""
    survivors = np.flatnonzero(sigmoid(boxes[:, 4]) >= conf_floor)
    return survivors[np.argsort(-boxes[survivors, 4], kind="stable")]


def nms_indices(boxes: np.ndarray, threshold: float, conf_floor: float = 0.0) -> np.ndarray:
    """Row indices of `boxes` kept by greedy NMS, in keep order."""
    boxes = as_box_array(boxes)
    order = _sorted_candidates(boxes, conf_floor)
    if len(order) == 0:
        return order
    iou = iou_matrix(boxes[order], boxes[order])
    return order[_greedy_keep(iou, order, threshold)]


def nms_standard(dets, threshold: float, conf_floor: float = 0.0):
    """
    Classic greedy NMS.

    Boxes with sigmoid(score) below conf_floor are dropped first. The rest
    are visited by score descending (ties in input order) and a box is kept
    iff its IoU with every kept box is <= threshold.

    Args:
        dets: List of Detection or (n, 5) array
        threshold: IoU threshold in [0, 1]
        conf_floor: Minimum sigmoid confidence

    Returns:
        Kept detections in keep order, same container kind as the input
    """
    keep = nms_indices(dets, threshold, conf_floor)
    if isinstance(dets, np.ndarray):
        return as_box_array(dets)[keep]
    return [dets[i] for i in keep]


def assign_regions(dets, W: float, H: float, K: int) -> np.ndarray:
    """Region index x-bin + K * y-bin of each detection (or point) center."""
    arr = np.asarray(dets, dtype=np.float64) if isinstance(dets, np.ndarray) else as_box_array(dets)
    if arr.size == 0:
        return np.zeros(0, dtype=np.int64)
    arr = arr.reshape(len(arr), -1)
    i = np.clip(np.floor(arr[:, 0] * K / W).astype(np.int64), 0, K - 1)
    j = np.clip(np.floor(arr[:, 1] * K / H).astype(np.int64), 0, K - 1)
    return i + K * j


def nms_region_indices(boxes: np.ndarray, thresholds: RegionThresholds, W: float, H: float,
                       conf_floor: float = DEFAULT_CONF_FLOOR) -> np.ndarray:
    boxes = as_box_array(boxes)
    regions = assign_regions(boxes, W, H, thresholds.K)
    kept = []
    for r, t in enumerate(thresholds.values):
        members = np.flatnonzero(regions == r)
        if len(members):
            kept.append(members[nms_indices(boxes[members], t, conf_floor)])
    return np.concatenate(kept) if kept else np.zeros(0, dtype=np.int64)


def nms_region_adaptive(dets, thresholds: RegionThresholds, W: float, H: float,
                        conf_floor: float = DEFAULT_CONF_FLOOR):
    """
    Independent NMS per region, each with its own threshold.

    Output is the concatenation of the per-region results in region order.
    There is no suppression across region borders.
    """
    keep = nms_region_indices(dets, thresholds, W, H, conf_floor)
    if isinstance(dets, np.ndarray):
        return as_box_array(dets)[keep]
    return [dets[i] for i in keep]


def _region_f1(pred_boxes: np.ndarray, gt_boxes: np.ndarray, criterion: MatchCriterion) -> float:
    if len(pred_boxes) == 0 and len(gt_boxes) == 0:
        return 1.0
    return match_hungarian(pred_boxes, gt_boxes, criterion).f1


def f1_region(dets, gt_points, region: int, criterion: MatchCriterion, W: float, H: float, K: int,
              gt_boxes: Optional[np.ndarray] = None) -> float:
    """
    F1 of the predictions and ground-truth points whose positions fall in one region.

    Both sets empty counts as a perfect 1.0. Pseudo boxes for the ground truth
    (needed by the box criterion and the default distance threshold) are built
    from the full point set unless given.
    """
    boxes = as_box_array(dets)
    points = np.asarray(gt_points, dtype=np.float64).reshape(-1, 2)
    if gt_boxes is None:
        gt_boxes = pseudo_box_array(points, W, H)
    pred_in = boxes[assign_regions(boxes, W, H, K) == region]
    gt_in = gt_boxes[assign_regions(points, W, H, K) == region]
    return _region_f1(pred_in, gt_in, criterion)


def threshold_grid(step: float = DEFAULT_SEARCH_STEP) -> np.ndarray:
    """{0, s, 2s, ..., 1}; 1 is appended when 1/s is not a whole number."""
    if not (0.0 < step <= 1.0):
        raise ValueError(f"search step must be in (0, 1], got {step}")
    n = int(np.floor(1.0 / step + 1e-9))
    grid = np.round(np.arange(n + 1) * step, 12)
    if grid[-1] < 1.0:
        grid = np.append(grid, 1.0)
    return np.minimum(grid, 1.0)


def region_f1_sweep(scene: SceneRecord, K: int, grid: np.ndarray, criterion: MatchCriterion,
                    conf_floor: float = DEFAULT_CONF_FLOOR) -> np.ndarray:
    """
    Per-region F1 of NMS at every grid threshold, shape (K*K, len(grid)).

    NMS on a fixed candidate set only changes where a threshold crosses one of
    the pairwise IoU values, so thresholds falling between the same two IoU
    values share one NMS run and one matching.
    """
    W, H = scene.width, scene.height
    boxes = scene.box_array
    points = scene.point_array
    gt_boxes = pseudo_box_array(points, W, H)
    box_regions = assign_regions(boxes, W, H, K)
    gt_regions = assign_regions(points, W, H, K)
    out = np.empty((K * K, len(grid)))
    for r in range(K * K):
        region_boxes = boxes[box_regions == r]
        region_gt = gt_boxes[gt_regions == r]
        order = _sorted_candidates(region_boxes, conf_floor)
        candidates = region_boxes[order]
        iou = iou_matrix(candidates, candidates)
        pair_ious = np.unique(iou[np.triu_indices(len(candidates), k=1)]) if len(candidates) > 1 else np.zeros(0)
        cache: Dict[int, float] = {}
        for g, t in enumerate(grid):
            key = int(np.searchsorted(pair_ious, t, side="right"))
            if key not in cache:
                kept = candidates[_greedy_keep(iou, order, t)] if len(candidates) else candidates
                cache[key] = _region_f1(kept, region_gt, criterion)
            out[r, g] = cache[key]
    return out


def search_thresholds(scene: SceneRecord, K: int, step: float = DEFAULT_SEARCH_STEP,
                      criterion: Optional[MatchCriterion] = None,
                      conf_floor: float = DEFAULT_CONF_FLOOR) -> RegionThresholds:
    """
    Per-region pseudo NMS threshold labels by linear search.

    For each region independently, NMS is run at thresholds 0, s, 2s, ..., 1
    and the threshold with the highest region F1 is kept; ties go to the
    smallest threshold.
    """
    criterion = criterion or MatchCriterion.distance()
    grid = threshold_grid(step)
    sweep = region_f1_sweep(scene, K, grid, criterion, conf_floor)
    labels = grid[np.argmax(sweep, axis=1)]
    logger.debug(f"{scene.id}: thresholds {np.round(labels, 3).tolist()} best F1 {np.round(sweep.max(axis=1), 3).tolist()}")
    return RegionThresholds.from_array(K, labels)
