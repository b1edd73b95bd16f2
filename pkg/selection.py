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
Decouple-then-align box selection.

The count decoder's estimate n_hat takes priority: of the n_c boxes that
survive NMS, only the min(round(n_hat), n_c) most confident are kept.
"""

import math
from dataclasses import dataclass
from typing import List

import numpy as np

from core import Detection, as_box_array, detections_to_array


@dataclass(frozen=True)
class SelectionResult:
    boxes: List[Detection]
    n_c: int
    n_hat: float
    n_final: int

    def box_array(self) -> np.ndarray:
        return detections_to_array(self.boxes)


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def selection_indices(boxes: np.ndarray, n_hat: float) -> np.ndarray:
    """Row indices of the kept boxes, by score descending (ties in input order)."""
    if n_hat < 0:
        raise ValueError(f"n_hat must be >= 0, got {n_hat}")
    boxes = as_box_array(boxes)
    order = np.argsort(-boxes[:, 4], kind="stable")
    return order[:min(round_half_up(n_hat), len(boxes))]


def decouple_then_align(nms_boxes, n_hat: float) -> SelectionResult:
    """
    Keep the round(n_hat) highest-confidence post-NMS boxes, or all of them
    when fewer survived NMS.

    Args:
        nms_boxes: Post-NMS detections (list of Detection or (n, 5) array)
        n_hat: Count decoder output, >= 0

    Returns:
        SelectionResult: Boxes sorted by score descending, with n_c, n_hat and n_final
    """
    arr = as_box_array(nms_boxes)
    keep = selection_indices(arr, n_hat)
    if isinstance(nms_boxes, np.ndarray):
        kept = [Detection(*(float(v) for v in arr[i])) for i in keep]
    else:
        kept = [nms_boxes[i] for i in keep]
    return SelectionResult(kept, len(arr), float(n_hat), len(kept))
