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
Domain types, geometry primitives and JSONL scene I/O.

Boxes are stored as center + size with a raw (pre-sigmoid) confidence, the
same 5-vector a detector head emits before NMS and confidence filtering.
"""

import json
import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

logger = logging.getLogger("CrowdHat.core")

Point = Tuple[float, float]


class CrowdHatError(RuntimeError):
    """Base class for every error raised by this package."""


class SceneFormatError(CrowdHatError):
    def __init__(self, message: str, line_number: Optional[int] = None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class ConfigError(CrowdHatError):
    pass


class ShapeError(CrowdHatError, ValueError):
    pass


class NonFiniteLossError(CrowdHatError):
    def __init__(self, sample_id: str, value: float):
        super().__init__(f"Non-finite loss {value} on sample '{sample_id}'")
        self.sample_id = sample_id


class TrainingDivergedError(CrowdHatError):
    pass


class ModelFormatError(CrowdHatError):
    pass


class StageError(CrowdHatError):
    def __init__(self, stage: str, artifact: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed (artifact: {artifact}): {cause}")
        self.stage = stage
        self.artifact = artifact


class WorkspaceLockedError(CrowdHatError):
    pass


def sigmoid(x):
    """Logistic sigmoid, numerically stable for large |x|."""
    return expit(x)


@dataclass(frozen=True)
class Detection:
    """One proposal or box: center, size and raw confidence."""
    cx: float
    cy: float
    w: float
    h: float
    score: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"Detection size must be positive, got w={self.w}, h={self.h}")

    def corners(self) -> Tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2,
                self.cx + self.w / 2, self.cy + self.h / 2)

    def as_row(self) -> List[float]:
        return [self.cx, self.cy, self.w, self.h, self.score]


@dataclass(frozen=True)
class PseudoBox:
    """Square box synthesized from a point annotation, centered on the point."""
    cx: float
    cy: float
    w: float
    h: float

    @property
    def side(self) -> float:
        return self.w


@dataclass(frozen=True)
class SceneRecord:
    id: str
    width: int
    height: int
    points: Tuple[Point, ...] = ()
    boxes: Tuple[Detection, ...] = ()
    proposals: Optional[Tuple[Detection, ...]] = None

    @property
    def count(self) -> int:
        return len(self.points)

    @cached_property
    def box_array(self) -> np.ndarray:
        return detections_to_array(self.boxes)

    @cached_property
    def proposal_array(self) -> Optional[np.ndarray]:
        if self.proposals is None:
            return None
        return detections_to_array(self.proposals)

    @cached_property
    def point_array(self) -> np.ndarray:
        return np.asarray(self.points, dtype=np.float64).reshape(-1, 2)

    def without_points(self) -> "SceneRecord":
        """Copy with ground truth removed; the only form inference ever sees."""
        return SceneRecord(self.id, self.width, self.height, (), self.boxes, self.proposals)

    def with_detections(self, boxes: Sequence[Detection],
                        proposals: Optional[Sequence[Detection]] = None) -> "SceneRecord":
        return SceneRecord(self.id, self.width, self.height, self.points,
                           tuple(boxes), None if proposals is None else tuple(proposals))


def detections_to_array(dets: Iterable[Detection]) -> np.ndarray:
    """Stack detections into an (n, 5) float64 array of [cx, cy, w, h, score]."""
    rows = [d.as_row() for d in dets]
    return np.asarray(rows, dtype=np.float64).reshape(-1, 5)


def array_to_detections(arr: np.ndarray) -> List[Detection]:
    arr = np.asarray(arr, dtype=np.float64).reshape(-1, 5)
    return [Detection(*(float(v) for v in row)) for row in arr]


def as_box_array(dets) -> np.ndarray:
    """Accept a list of Detection or an (n, >=5) array and return an (n, 5) array."""
    if isinstance(dets, np.ndarray):
        arr = np.asarray(dets, dtype=np.float64)
        return arr.reshape(0, 5) if arr.size == 0 else arr.reshape(len(arr), -1)[:, :5]
    return detections_to_array(dets)


def to_corners(boxes: np.ndarray) -> np.ndarray:
    """(n, >=4) center/size array -> (n, 4) [x1, y1, x2, y2]."""
    boxes = np.asarray(boxes, dtype=np.float64)
    half_w = boxes[:, 2] / 2
    half_h = boxes[:, 3] / 2
    return np.stack([boxes[:, 0] - half_w, boxes[:, 1] - half_h,
                     boxes[:, 0] + half_w, boxes[:, 1] + half_h], axis=1)


def iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """
    Pairwise intersection-over-union of two center/size box arrays.

    Args:
        boxes_a: (n, >=4) array of [cx, cy, w, h, ...]
        boxes_b: (m, >=4) array of [cx, cy, w, h, ...]

    Returns:
        np.ndarray: (n, m) IoU values in [0, 1]
    """
    boxes_a = np.asarray(boxes_a, dtype=np.float64)
    boxes_b = np.asarray(boxes_b, dtype=np.float64)
    if boxes_a.size == 0 or boxes_b.size == 0:
        return np.zeros((len(boxes_a) if boxes_a.size else 0, len(boxes_b) if boxes_b.size else 0))
    a = to_corners(boxes_a)
    b = to_corners(boxes_b)
    xx1 = np.maximum(a[:, None, 0], b[None, :, 0])
    yy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    xx2 = np.minimum(a[:, None, 2], b[None, :, 2])
    yy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.maximum(0.0, xx2 - xx1) * np.maximum(0.0, yy2 - yy1)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return inter / union


def iou(a: Detection, b: Detection) -> float:
    """Intersection-over-union of two detections' axis-aligned rectangles."""
    return float(iou_matrix(np.array([a.as_row()]), np.array([b.as_row()]))[0, 0])


# ---------------------------------------------------------------------------
# JSONL I/O
# ---------------------------------------------------------------------------

@dataclass
class LoadStats:
    """Counters filled in by load_scenes."""
    scenes: int = 0
    clamped: int = 0
    clamped_scene_ids: List[str] = field(default_factory=list)


def _clamp(value: float, upper: float) -> Tuple[float, bool]:
    if value < 0.0:
        return 0.0, True
    if value > upper:
        return float(upper), True
    return value, False


def _parse_detections(rows, width: int, height: int, what: str, line_number: int):
    dets = []
    clamped = 0
    try:
        for row in rows:
            if len(row) != 5:
                raise SceneFormatError(f"{what} entry must have 5 values, got {len(row)}", line_number)
            cx, cy, w, h, score = (float(v) for v in row)
            if not (w > 0 and h > 0):
                raise SceneFormatError(f"{what} entry has non-positive size ({w}, {h})", line_number)
            cx, cx_hit = _clamp(cx, width)
            cy, cy_hit = _clamp(cy, height)
            clamped += cx_hit + cy_hit
            dets.append(Detection(cx, cy, w, h, score))
    except (TypeError, ValueError) as e:
        raise SceneFormatError(f"invalid {what} entry: {e}", line_number) from e
    return tuple(dets), clamped


def _parse_points(rows, width: int, height: int, line_number: int):
    points = []
    clamped = 0
    try:
        for p in rows:
            if len(p) != 2:
                raise SceneFormatError(f"point must have 2 values, got {len(p)}", line_number)
            x, x_hit = _clamp(float(p[0]), width)
            y, y_hit = _clamp(float(p[1]), height)
            clamped += x_hit + y_hit
            points.append((x, y))
    except (TypeError, ValueError) as e:
        raise SceneFormatError(f"invalid point: {e}", line_number) from e
    return tuple(points), clamped


def _rows(obj: dict, key: str):
    value = obj.get(key)
    return () if value is None else value


def scene_from_dict(obj: dict, line_number: int = 0) -> Tuple[SceneRecord, int]:
    """
    Build a SceneRecord from its JSON object (or an equivalent dict of arrays).

    Out-of-frame coordinates are clamped into the frame.

    Returns:
        Tuple[SceneRecord, int]: The scene and the number of clamped coordinates

    Raises:
        SceneFormatError: On a missing field or any malformed point or detection
    """
    try:
        scene_id = str(obj["id"])
        width = int(obj["width"])
        height = int(obj["height"])
    except (KeyError, TypeError, ValueError) as e:
        raise SceneFormatError(f"missing or invalid field: {e}", line_number) from e
    if width <= 0 or height <= 0:
        raise SceneFormatError(f"image size must be positive, got {width}x{height}", line_number)

    points, clamped = _parse_points(_rows(obj, "points"), width, height, line_number)
    boxes, n = _parse_detections(_rows(obj, "boxes"), width, height, "box", line_number)
    clamped += n
    proposals = None
    if obj.get("proposals") is not None:
        proposals, n = _parse_detections(obj["proposals"], width, height, "proposal", line_number)
        clamped += n
    return SceneRecord(scene_id, width, height, points, boxes, proposals), clamped


def scene_to_dict(scene: SceneRecord) -> dict:
    return {
        "id": scene.id,
        "width": scene.width,
        "height": scene.height,
        "points": [[x, y] for x, y in scene.points],
        "boxes": [d.as_row() for d in scene.boxes],
        "proposals": None if scene.proposals is None else [d.as_row() for d in scene.proposals],
    }


def load_scenes(path: str, stats: Optional[LoadStats] = None) -> List[SceneRecord]:
    """
    Load scenes from a JSONL file, one scene object per line.

    Out-of-frame coordinates are clamped into [0, width] x [0, height] and
    counted; blank lines are skipped.

    Args:
        path: JSONL file path
        stats: Optional counters to fill in

    Returns:
        List[SceneRecord]: Scenes in file order

    Raises:
        SceneFormatError: If a line is not valid JSON or violates the schema
    """
    stats = stats if stats is not None else LoadStats()
    scenes = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_number, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise SceneFormatError(f"invalid JSON: {e.msg}", line_number) from e
            if not isinstance(obj, dict):
                raise SceneFormatError("scene must be a JSON object", line_number)
            scene, clamped = scene_from_dict(obj, line_number)
            if clamped:
                stats.clamped += clamped
                stats.clamped_scene_ids.append(scene.id)
            scenes.append(scene)
    stats.scenes = len(scenes)
    if stats.clamped:
        logger.warning(f"Clamped {stats.clamped} out-of-frame coordinates in "
                       f"{len(stats.clamped_scene_ids)} scenes from {path}")
    return scenes


def save_scenes(scenes: Iterable[SceneRecord], path: str) -> None:
    """Write scenes as JSONL; floats are written at repr precision so reload is bit-exact."""
    with open(path, "w", encoding="utf-8") as fh:
        for scene in scenes:
            fh.write(json.dumps(scene_to_dict(scene)))
            fh.write("\n")
