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
Mixed 2D-1D compression of detector output features.

2D: the image is cut into S x S equal patches and each patch accumulates the
normalized box areas (or sigmoid confidences) of the detections centered in
it. 1D: each feature is scaled by alpha, squashed into [0, 1) (tanh for
area, sigmoid for confidence) and histogrammed into L bins.

Matrix index is (i, j) = (x-bin, y-bin).
"""

import logging
import os
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from core import ConfigError, SceneRecord, ShapeError, as_box_array, sigmoid

logger = logging.getLogger("CrowdHat.compress")

CHANNEL_ORDER = ("box_area", "box_conf", "proposal_area", "proposal_conf")


@dataclass
class CompressionConfig:
    S: int = 64
    L: int = 256
    alpha_box_area: float = 200.0
    alpha_box_conf: float = 1.0
    alpha_proposal_area: float = 200.0
    alpha_proposal_conf: float = 1.0
    two_stage: bool = False
    # None keeps the bare sigmoid of the 2D confidence matrices
    alpha_2d_conf: Optional[float] = None

    @property
    def channels(self) -> int:
        return 4 if self.two_stage else 2

    @property
    def channel_order(self) -> Tuple[str, ...]:
        return CHANNEL_ORDER[:self.channels]

    def validate(self) -> "CompressionConfig":
        if self.S < 1 or self.L < 1:
            raise ConfigError(f"S and L must be >= 1, got S={self.S}, L={self.L}")
        for name in ("alpha_box_area", "alpha_box_conf", "alpha_proposal_area", "alpha_proposal_conf"):
            if getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.alpha_2d_conf is not None and self.alpha_2d_conf < 1.0:
            raise ConfigError(f"alpha_2d_conf must be >= 1, got {self.alpha_2d_conf}")
        return self


@dataclass(frozen=True)
class CompressedFeatures:
    t2d: np.ndarray
    t1d: np.ndarray
    channel_order: Tuple[str, ...]

    @property
    def C(self) -> int:
        return self.t2d.shape[0]

    @property
    def S(self) -> int:
        return self.t2d.shape[1]

    @property
    def L(self) -> int:
        return self.t1d.shape[1]


def _cell_index(dets: np.ndarray, W: float, H: float, S: int) -> np.ndarray:
    # cx * S is exact for power-of-two S, so only the division rounds
    i = np.clip(np.floor(dets[:, 0] * S / W).astype(np.int64), 0, S - 1)
    j = np.clip(np.floor(dets[:, 1] * S / H).astype(np.int64), 0, S - 1)
    return i * S + j


def _accumulate_2d(dets: np.ndarray, values: np.ndarray, W: float, H: float, S: int) -> np.ndarray:
    if len(dets) == 0:
        return np.zeros((S, S))
    flat = np.bincount(_cell_index(dets, W, H, S), weights=values, minlength=S * S)
    return flat.reshape(S, S)


def _histogram(mapped: np.ndarray, L: int) -> np.ndarray:
    if len(mapped) == 0:
        return np.zeros(L)
    idx = np.clip(np.floor(mapped * L).astype(np.int64), 0, L - 1)
    return np.bincount(idx, minlength=L).astype(np.float64)


def normalized_area(dets: np.ndarray, W: float, H: float) -> np.ndarray:
    return (dets[:, 2] / W) * (dets[:, 3] / H)


def compress_2d_area(dets, W: float, H: float, S: int) -> np.ndarray:
    """
    S x S matrix of summed normalized areas (w/W)(h/H) per patch.

    Rescaling the frame and every box by a power of two leaves the result
    bit-identical. Other scale factors agree up to floating-point rounding of
    the normalized areas, and a center lying within rounding distance of a
    cell border may change cell.
    """
    dets = as_box_array(dets)
    return _accumulate_2d(dets, normalized_area(dets, W, H), W, H, S)


def compress_2d_conf(dets, W: float, H: float, S: int, alpha: float = 1.0) -> np.ndarray:
    """S x S matrix of summed sigmoid confidences per patch (no scaling by default)."""
    dets = as_box_array(dets)
    return _accumulate_2d(dets, sigmoid(dets[:, 4] * alpha), W, H, S)


def compress_1d_conf(dets, L: int, alpha: float = 1.0) -> np.ndarray:
    """Length-L histogram of sigmoid(alpha * score)."""
    dets = as_box_array(dets)
    return _histogram(sigmoid(dets[:, 4] * alpha), L)


def compress_1d_area(dets, W: float, H: float, L: int, alpha: float = 1.0) -> np.ndarray:
    """Length-L histogram of tanh(alpha * normalized area)."""
    dets = as_box_array(dets)
    return _histogram(np.tanh(normalized_area(dets, W, H) * alpha), L)


def compress_scene(scene: SceneRecord, cfg: CompressionConfig) -> CompressedFeatures:
    """
    Compress one scene's detector outputs into the network input pair.

    Channels follow CHANNEL_ORDER: boxes first, then proposals for two-stage
    detectors.

    Raises:
        ShapeError: If two_stage is set and the scene carries no proposals
    """
    if cfg.two_stage and scene.proposal_array is None:
        raise ShapeError(f"scene '{scene.id}': two-stage compression needs proposals")
    W, H, S, L = scene.width, scene.height, cfg.S, cfg.L
    sources = [(scene.box_array, cfg.alpha_box_area, cfg.alpha_box_conf)]
    if cfg.two_stage:
        sources.append((scene.proposal_array, cfg.alpha_proposal_area, cfg.alpha_proposal_conf))

    conf_2d_alpha = 1.0 if cfg.alpha_2d_conf is None else cfg.alpha_2d_conf
    t2d, t1d = [], []
    for dets, alpha_area, alpha_conf in sources:
        t2d.append(compress_2d_area(dets, W, H, S))
        t2d.append(compress_2d_conf(dets, W, H, S, conf_2d_alpha))
        t1d.append(compress_1d_area(dets, W, H, L, alpha_area))
        t1d.append(compress_1d_conf(dets, L, alpha_conf))
    return CompressedFeatures(np.stack(t2d), np.stack(t1d), cfg.channel_order)


def dump_features(features: CompressedFeatures, path: str) -> None:
    """
    Write each channel as a CSV grid for inspection.

    2D matrices are written with one row per y-bin (row = j), so the grid
    reads in image orientation; 1D vectors are a single row.
    """
    os.makedirs(path, exist_ok=True)
    for c, name in enumerate(features.channel_order):
        np.savetxt(os.path.join(path, f"t2d_{name}.csv"), features.t2d[c].T, fmt="%.17g", delimiter=",")
        np.savetxt(os.path.join(path, f"t1d_{name}.csv"), features.t1d[c][None, :], fmt="%.17g", delimiter=",")
    logger.info(f"Dumped {features.C} channels to {path}")


def load_dumped_features(path: str, channel_order: Tuple[str, ...]) -> CompressedFeatures:
    """Parse a dump_features directory back into CompressedFeatures."""
    t2d, t1d = [], []
    for name in channel_order:
        t2d.append(np.loadtxt(os.path.join(path, f"t2d_{name}.csv"), delimiter=",", ndmin=2).T)
        t1d.append(np.loadtxt(os.path.join(path, f"t1d_{name}.csv"), delimiter=",", ndmin=1).reshape(-1))
    return CompressedFeatures(np.stack(t2d), np.stack(t1d), tuple(channel_order))
