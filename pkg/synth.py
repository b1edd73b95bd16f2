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
Synthetic crowd scenes and a noisy detector simulator.

The simulator stands in for a pretrained detection backbone: dense regions
produce smaller boxes with lower confidence and lower recall, and every
detected head may spawn near-duplicate boxes so that the NMS threshold
actually matters.
"""

import logging
import zlib
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from core import ConfigError, Detection, PseudoBox, SceneRecord

logger = logging.getLogger("CrowdHat.synth")

PSEUDO_BOX_MIN_SIDE = 4.0


@dataclass
class SynthConfig:
    seed: int = 7
    num_scenes: int = 500
    width: int = 512
    height: int = 384
    count_range: Tuple[int, int] = (20, 300)
    cluster_count_range: Tuple[int, int] = (1, 4)
    density_gradient: float = 2.0
    detector_recall_base: float = 0.6
    fp_rate: float = 0.05
    size_noise: float = 0.15
    conf_density_slope: float = 0.08
    proposal_multiplier: float = 2.0
    # Detector knobs beyond the core set
    center_noise: float = 0.05
    score_noise: float = 0.8
    conf_base: float = 2.5
    recall_half_density: float = 4.0
    duplicate_rate: float = 0.6
    duplicate_offset: float = 0.35

    def validate(self) -> "SynthConfig":
        lo, hi = self.count_range
        if not (0 <= lo <= hi):
            raise ConfigError(f"count_range must satisfy 0 <= min <= max, got {self.count_range}")
        clo, chi = self.cluster_count_range
        if not (0 <= clo <= chi):
            raise ConfigError(f"cluster_count_range must satisfy 0 <= min <= max, got {self.cluster_count_range}")
        if self.num_scenes < 0:
            raise ConfigError(f"num_scenes must be >= 0, got {self.num_scenes}")
        if not (0.0 < self.detector_recall_base <= 1.0):
            raise ConfigError(f"detector_recall_base must be in (0, 1], got {self.detector_recall_base}")
        if self.proposal_multiplier < 1.0:
            raise ConfigError(f"proposal_multiplier must be >= 1, got {self.proposal_multiplier}")
        for name in ("density_gradient", "fp_rate", "size_noise", "conf_density_slope",
                     "center_noise", "score_noise", "duplicate_rate", "duplicate_offset"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.recall_half_density <= 0:
            raise ConfigError(f"recall_half_density must be > 0, got {self.recall_half_density}")
        return self


def max_pseudo_side(width: float, height: float) -> float:
    return min(width, height) / 8.0


def pseudo_box_sides(points: np.ndarray, width: float, height: float,
                     s_min: float = PSEUDO_BOX_MIN_SIDE,
                     s_max: Optional[float] = None) -> np.ndarray:
    """Nearest-neighbor distance per point, clamped to [s_min, s_max]."""
    s_max = max_pseudo_side(width, height) if s_max is None else s_max
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(points) == 0:
        return np.zeros(0)
    if len(points) == 1:
        return np.array([s_max])
    distances, _ = cKDTree(points).query(points, k=2)
    return np.clip(distances[:, 1], s_min, s_max)


def pseudo_boxes_from_points(points: Sequence, width: float, height: float,
                             s_min: float = PSEUDO_BOX_MIN_SIDE,
                             s_max: Optional[float] = None) -> List[PseudoBox]:
    """
    One square pseudo box per point annotation.

    The side is the distance to the nearest other point, clamped to
    [s_min, s_max] with s_max defaulting to min(width, height) / 8. An
    isolated single point gets s_max.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    sides = pseudo_box_sides(points, width, height, s_min, s_max)
    return [PseudoBox(float(x), float(y), float(s), float(s)) for (x, y), s in zip(points, sides)]


def pseudo_box_array(points, width: float, height: float) -> np.ndarray:
    """(n, 4) center/size array of the pseudo boxes of a point set."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    sides = pseudo_box_sides(points, width, height)
    return np.column_stack([points, sides, sides])


def local_density(points: np.ndarray, centers: np.ndarray, radius: float) -> np.ndarray:
    """Number of points within radius of each center (a point does not count itself)."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
    if len(points) == 0 or len(centers) == 0:
        return np.zeros(len(centers))
    counts = cKDTree(points).query_ball_point(centers, r=radius, return_length=True)
    return np.asarray(counts, dtype=np.float64)


def _scene_rng(seed: int, stream: int, key: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream, key])


def _scene_key(scene_id: str) -> int:
    return zlib.crc32(scene_id.encode("utf-8"))


def _sample_in_frame(rng: np.random.Generator, mean, std, n: int, width: int, height: int) -> np.ndarray:
    out = rng.normal(mean, std, size=(n, 2))
    bad = (out[:, 0] < 0) | (out[:, 0] > width) | (out[:, 1] < 0) | (out[:, 1] > height)
    while bad.any():
        out[bad] = rng.normal(mean, std, size=(int(bad.sum()), 2))
        bad = (out[:, 0] < 0) | (out[:, 0] > width) | (out[:, 1] < 0) | (out[:, 1] > height)
    return out


def _ground_truth_points(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    lo, hi = cfg.count_range
    n = int(rng.integers(lo, hi + 1))
    if n == 0:
        return np.zeros((0, 2))
    k = int(rng.integers(cfg.cluster_count_range[0], cfg.cluster_count_range[1] + 1))
    clustered_fraction = cfg.density_gradient / (1.0 + cfg.density_gradient) if k > 0 else 0.0
    n_clustered = int(round(n * clustered_fraction))
    n_background = n - n_clustered

    parts = [rng.uniform((0.0, 0.0), (cfg.width, cfg.height), size=(n_background, 2))]
    if n_clustered:
        centers = rng.uniform((0.1 * cfg.width, 0.1 * cfg.height),
                              (0.9 * cfg.width, 0.9 * cfg.height), size=(k, 2))
        spreads = min(cfg.width, cfg.height) * rng.uniform(0.04, 0.12, size=k) / (1.0 + 0.25 * cfg.density_gradient)
        sizes = rng.multinomial(n_clustered, rng.dirichlet(np.ones(k)))
        for center, spread, size in zip(centers, spreads, sizes):
            if size:
                parts.append(_sample_in_frame(rng, center, spread, int(size), cfg.width, cfg.height))
    return np.concatenate(parts, axis=0)


def generate_ground_truth(cfg: SynthConfig) -> List[SceneRecord]:
    """
    Generate point-annotated scenes (no detections yet).

    Points come from a mixture of Gaussian clusters plus a uniform
    background, so region densities vary within each scene. Each scene draws
    from its own stream keyed by (seed, scene index).

    Raises:
        ConfigError: If the frame is too small for the requested counts
    """
    cfg.validate()
    if min(cfg.width, cfg.height) < 8 * PSEUDO_BOX_MIN_SIDE:
        raise ConfigError(f"frame {cfg.width}x{cfg.height} too small: min side must be "
                          f">= {8 * PSEUDO_BOX_MIN_SIDE:g} px")
    if cfg.count_range[1] > cfg.width * cfg.height:
        raise ConfigError(f"frame {cfg.width}x{cfg.height} too small to place "
                          f"{cfg.count_range[1]} people")
    scenes = []
    for index in range(cfg.num_scenes):
        rng = _scene_rng(cfg.seed, 0, index)
        points = _ground_truth_points(cfg, rng)
        scenes.append(SceneRecord(
            id=f"scene-{index:05d}",
            width=cfg.width,
            height=cfg.height,
            points=tuple((float(x), float(y)) for x, y in points),
        ))
    logger.info(f"Generated {len(scenes)} scenes, "
                f"{sum(s.count for s in scenes)} people in total")
    return scenes


def _clamped_rows(rows: np.ndarray, width: int, height: int) -> List[Detection]:
    rows = rows.reshape(-1, 5)
    rows[:, 0] = np.clip(rows[:, 0], 0.0, width)
    rows[:, 1] = np.clip(rows[:, 1], 0.0, height)
    return [Detection(*(float(v) for v in row)) for row in rows]


def simulate_detector(scene: SceneRecord, cfg: SynthConfig) -> SceneRecord:
    """
    Simulate raw (pre-NMS) detector output for a point-annotated scene.

    Per true head: detected with a probability falling from 1 at zero local
    density towards detector_recall_base; the box is the pseudo box scaled by
    lognormal noise; the raw score has a mean logit falling linearly with
    local density. Each detected head spawns Poisson(duplicate_rate)
    near-duplicates, and Poisson(fp_rate * N) background false positives are
    added. Proposals overdraw the boxes by proposal_multiplier with extra
    jitter and noisier scores.

    Returns:
        SceneRecord: The scene with boxes and proposals filled in
    """
    rng = _scene_rng(cfg.seed, 1, _scene_key(scene.id))
    W, H = scene.width, scene.height
    points = scene.point_array
    n = len(points)
    s_max = max_pseudo_side(W, H)
    sides = pseudo_box_sides(points, W, H)
    density = local_density(points, points, s_max) - 1.0 if n else np.zeros(0)

    p_detect = 1.0 - (1.0 - cfg.detector_recall_base) * density / (density + cfg.recall_half_density)
    detected = rng.uniform(size=n) < p_detect

    box_sides = sides * np.exp(cfg.size_noise * rng.normal(size=n))
    centers = points + cfg.center_noise * sides[:, None] * rng.normal(size=(n, 2))
    logits = cfg.conf_base - cfg.conf_density_slope * density
    scores = logits + cfg.score_noise * rng.normal(size=n)
    heads = np.column_stack([centers, box_sides, box_sides, scores])[detected]

    rows = [heads]
    if cfg.duplicate_rate > 0 and len(heads):
        n_dups = rng.poisson(cfg.duplicate_rate, size=len(heads))
        src = np.repeat(heads, n_dups, axis=0)
        if len(src):
            angle = rng.uniform(0.0, 2 * np.pi, size=len(src))
            offset = cfg.duplicate_offset * src[:, 2] * rng.uniform(0.5, 1.5, size=len(src))
            dups = src.copy()
            dups[:, 0] += offset * np.cos(angle)
            dups[:, 1] += offset * np.sin(angle)
            scale = np.exp(cfg.size_noise * rng.normal(size=len(src)))
            dups[:, 2] *= scale
            dups[:, 3] *= scale
            dups[:, 4] -= 0.5 + 0.5 * np.abs(rng.normal(size=len(src)))
            rows.append(dups)

    n_fp = int(rng.poisson(cfg.fp_rate * n)) if cfg.fp_rate > 0 else 0
    if n_fp:
        fp_sides = rng.uniform(PSEUDO_BOX_MIN_SIDE, s_max, size=n_fp)
        fp = np.column_stack([
            rng.uniform(0.0, W, size=n_fp), rng.uniform(0.0, H, size=n_fp),
            fp_sides, fp_sides,
            cfg.conf_base - 3.0 + (cfg.score_noise + 1.0) * rng.normal(size=n_fp),
        ])
        rows.append(fp)

    boxes = np.concatenate(rows, axis=0) if rows else np.zeros((0, 5))

    extra = int(round((cfg.proposal_multiplier - 1.0) * len(boxes)))
    picks = np.concatenate([np.arange(len(boxes)), rng.integers(0, max(len(boxes), 1), size=extra)]) \
        if len(boxes) else np.zeros(0, dtype=int)
    proposals = boxes[picks].copy()
    if len(proposals):
        proposals[:, :2] += 2 * cfg.center_noise * proposals[:, 2:3] * rng.normal(size=(len(proposals), 2))
        scale = np.exp(1.5 * cfg.size_noise * rng.normal(size=len(proposals)))
        proposals[:, 2] *= scale
        proposals[:, 3] *= scale
        proposals[:, 4] += 2 * cfg.score_noise * rng.normal(size=len(proposals))

    return scene.with_detections(_clamped_rows(boxes, W, H), _clamped_rows(proposals, W, H))


def simulate_dataset(cfg: SynthConfig) -> List[SceneRecord]:
    """Ground truth plus simulated detector output for every scene."""
    return [simulate_detector(scene, cfg) for scene in generate_ground_truth(cfg)]
