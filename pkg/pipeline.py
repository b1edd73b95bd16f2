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
End-to-end Crowd Hat workflow: simulate -> compress -> search -> train ->
infer -> eval, with every intermediate artifact written to the workspace.

The detector stays fixed: its outputs are compressed and the searched
per-region thresholds are saved to disk as training samples, then the Hat
network is trained on those files alone.
"""

import copy
import csv
import hashlib
import json
import logging
import math
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch
from tqdm import tqdm

from binary_protocol import (binary_to_dict, binary_to_features, dict_to_binary,
                             features_to_binary, read_binary, write_binary)
from compress import CompressedFeatures, CompressionConfig, compress_scene
from config import PipelineConfig
from core import CrowdHatError, SceneRecord, StageError, WorkspaceLockedError, load_scenes, save_scenes
from metrics import (MatchCriterion, average_precision, count_metrics, eval_localization_qnrf,
                     localization_report)
from net import HatModel, TrainSample, build_model, count_parameters, predict, save_model, train
from nms import RegionThresholds, nms_indices, nms_region_indices, search_thresholds
from selection import selection_indices
from synth import pseudo_box_array, simulate_dataset
from tools import measure_time

logger = logging.getLogger("CrowdHat.pipeline")

METHODS = ("fixed_nms", "oracle_region_nms", "hat_region_nms", "hat_count_align", "crowd_hat")
SPLITS = ("train", "val")


@dataclass
class Prediction:
    id: str
    boxes: np.ndarray
    n_hat: float
    n_c: int
    n_final: int
    thresholds: Optional[np.ndarray] = None

    @property
    def count(self) -> int:
        return self.n_final

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "boxes": self.boxes.tolist(),
            "n_hat": self.n_hat,
            "n_c": self.n_c,
            "n_final": self.n_final,
            "thresholds": None if self.thresholds is None else self.thresholds.tolist(),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "Prediction":
        thresholds = obj.get("thresholds")
        return cls(str(obj["id"]), np.asarray(obj["boxes"], dtype=np.float64).reshape(-1, 5),
                   float(obj["n_hat"]), int(obj["n_c"]), int(obj["n_final"]),
                   None if thresholds is None else np.asarray(thresholds, dtype=np.float64))


def save_predictions(predictions: Iterable[Prediction], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in predictions:
            fh.write(json.dumps(p.to_dict()))
            fh.write("\n")


def load_predictions(path: str) -> List[Prediction]:
    with open(path, "r", encoding="utf-8") as fh:
        return [Prediction.from_dict(json.loads(line)) for line in fh if line.strip()]


def split_of(scene_id: str, seed: int) -> str:
    """80/20 train/val split keyed on a hash of (seed, scene id)."""
    digest = hashlib.sha256(f"{seed}:{scene_id}".encode("utf-8")).hexdigest()
    return "val" if int(digest, 16) % 100 < 20 else "train"


# ---------------------------------------------------------------------------
# Save-to-disk training data
# ---------------------------------------------------------------------------

def write_features(features: Dict[str, CompressedFeatures], out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    for scene_id, f in features.items():
        write_binary(os.path.join(out_dir, f"{scene_id}.bin"), features_to_binary(f))


def read_features(path: str) -> CompressedFeatures:
    return binary_to_features(read_binary(path))


def compress_scenes(scenes: Sequence[SceneRecord], cfg: CompressionConfig,
                    progress: bool = False) -> Dict[str, CompressedFeatures]:
    return {s.id: compress_scene(s, cfg) for s in tqdm(scenes, desc="compress", disable=not progress)}


def build_train_samples(scenes: Sequence[SceneRecord], config: PipelineConfig,
                        features: Optional[Dict[str, CompressedFeatures]] = None,
                        progress: bool = False) -> List[TrainSample]:
    """Searched threshold labels + ground-truth count for each scene, paired with its features."""
    criterion = config.nms.match_criterion()
    samples = []
    for scene in tqdm(scenes, desc="search", disable=not progress):
        f = features[scene.id] if features is not None else compress_scene(scene, config.compression)
        labels = search_thresholds(scene, config.arch.K, config.nms.step, criterion, config.nms.conf_floor)
        samples.append(TrainSample(scene.id, f.t2d, f.t1d, labels.as_array(), scene.count))
    return samples


def write_train_samples(samples: Iterable[TrainSample], out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    for s in samples:
        write_binary(os.path.join(out_dir, f"{s.scene_id}.pkl"), dict_to_binary(s.to_dict()))


def load_train_samples(in_dir: str) -> List[TrainSample]:
    names = sorted(n for n in os.listdir(in_dir) if n.endswith(".pkl"))
    return [TrainSample.from_dict(binary_to_dict(read_binary(os.path.join(in_dir, n)))) for n in names]


def write_loss_curve(curve: Sequence[float], path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss"])
        for epoch, value in enumerate(curve, start=1):
            writer.writerow([epoch, repr(float(value))])


def train_model(samples: Sequence[TrainSample], config: PipelineConfig,
                progress: bool = False) -> Tuple[HatModel, List[float]]:
    if not samples:
        raise CrowdHatError("empty dataset: no training samples")
    t = config.train
    model = build_model(config.arch, seed=t.seed, lr=t.lr)
    logger.info(f"Training {count_parameters(model)} parameters on {len(samples)} samples "
                f"({t.epochs} epochs, batch {t.batch_size}, lr {t.lr:g}, mode {t.mode})")
    return train(model, samples, epochs=t.epochs, batch_size=t.batch_size, lr=t.lr,
                 lam=t.lam, mode=t.mode, seed=t.seed, progress=progress)


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

def infer_scene(scene: SceneRecord, model: HatModel, compression: CompressionConfig,
                conf_floor: float) -> Prediction:
    """
    Region-adaptive NMS with predicted thresholds, then decouple-then-align.

    Ground truth is stripped before anything else runs.
    """
    scene = scene.without_points()
    features = compress_scene(scene, compression)
    thresholds, n_hat = predict(model, features)
    region = RegionThresholds.from_array(model.arch.K, np.clip(thresholds, 0.0, 1.0))
    boxes = scene.box_array
    nms_boxes = boxes[nms_region_indices(boxes, region, scene.width, scene.height, conf_floor)]
    kept = nms_boxes[selection_indices(nms_boxes, n_hat)]
    return Prediction(scene.id, kept, n_hat, len(nms_boxes), len(kept), region.as_array())


def infer_scenes(scenes: Sequence[SceneRecord], model: HatModel, compression: CompressionConfig,
                 conf_floor: float, progress: bool = False) -> List[Prediction]:
    return [infer_scene(s, model, compression, conf_floor)
            for s in tqdm(scenes, desc="infer", disable=not progress)]


def baseline_fixed_nms(scenes: Sequence[SceneRecord], threshold: float, conf_floor: float) -> List[Prediction]:
    """Detection-counting baseline: one global NMS threshold, count = boxes kept."""
    out = []
    for s in scenes:
        kept = s.box_array[nms_indices(s.box_array, threshold, conf_floor)]
        out.append(Prediction(s.id, kept, float(len(kept)), len(kept), len(kept)))
    return out


def fixed_threshold_sweep(scenes: Sequence[SceneRecord], grid: Sequence[float], conf_floor: float,
                          criterion: MatchCriterion) -> List[Tuple[float, float]]:
    """Dataset F1 of the fixed-NMS baseline at each threshold of the grid."""
    gts = [pseudo_box_array(s.point_array, s.width, s.height) for s in scenes]
    rows = []
    for t in grid:
        preds = [p.boxes for p in baseline_fixed_nms(scenes, t, conf_floor)]
        rows.append((float(t), localization_report(preds, gts, criterion).f1))
    return rows


def best_fixed_threshold(scenes: Sequence[SceneRecord], grid: Sequence[float], conf_floor: float,
                         criterion: MatchCriterion) -> float:
    """Grid threshold with the best dataset F1; ties go to the smallest."""
    rows = fixed_threshold_sweep(scenes, grid, conf_floor, criterion)
    best = max(f1 for _, f1 in rows)
    return next(t for t, f1 in rows if f1 == best)


def oracle_region_predictions(scenes: Sequence[SceneRecord], samples: Dict[str, TrainSample], K: int,
                              conf_floor: float) -> List[Prediction]:
    """Region-adaptive NMS with the searched labels (uses ground truth; an upper bound)."""
    out = []
    for s in scenes:
        region = RegionThresholds.from_array(K, samples[s.id].thresholds)
        kept = s.box_array[nms_region_indices(s.box_array, region, s.width, s.height, conf_floor)]
        out.append(Prediction(s.id, kept, float(len(kept)), len(kept), len(kept), region.as_array()))
    return out


def align_predictions(base: Sequence[Prediction], hat: Sequence[Prediction], count_from_hat: bool) -> List[Prediction]:
    """
    Re-select the boxes of `base` with the count decoder output of `hat`
    (decouple-then-align); with count_from_hat False the boxes are returned as is.
    """
    out = []
    for b, h in zip(base, hat):
        if count_from_hat:
            kept = b.boxes[selection_indices(b.boxes, h.n_hat)]
            out.append(Prediction(b.id, kept, h.n_hat, len(b.boxes), len(kept), b.thresholds))
        else:
            out.append(Prediction(b.id, b.boxes, float(len(b.boxes)), len(b.boxes), len(b.boxes), h.thresholds))
    return out


def evaluate_predictions(predictions: Sequence[Prediction], scenes: Sequence[SceneRecord],
                         criterion: MatchCriterion) -> Dict[str, float]:
    """
    Counting, localization and detection metrics of predictions against
    the ground truth of the matching scenes (joined on id).
    """
    by_id = {s.id: s for s in scenes}
    missing = [p.id for p in predictions if p.id not in by_id]
    if missing:
        raise CrowdHatError(f"predictions for unknown scenes: {missing[:5]}")
    matched = [(p, by_id[p.id]) for p in predictions]
    if not matched:
        raise CrowdHatError("no predictions to evaluate")
    gts = [pseudo_box_array(s.point_array, s.width, s.height) for _, s in matched]
    preds = [p.boxes for p, _ in matched]
    counting = count_metrics([p.count for p, _ in matched], [s.count for _, s in matched])
    loc = localization_report(preds, gts, criterion)
    qnrf = eval_localization_qnrf([b[:, :2] for b in preds], [g[:, :2] for g in gts])
    result = {
        "mae": counting.mae,
        "rmse": counting.rmse,
        "precision": loc.precision,
        "recall": loc.recall,
        "f1": loc.f1,
        "f1_qnrf": qnrf.f1,
    }
    if sum(len(g) for g in gts):
        result["ap"] = average_precision(preds, gts)
    return result


def write_metrics_csv(rows: Sequence[Tuple[str, str, str, float]], path: str) -> None:
    """One row per (method, metric, split, value); values at repr precision."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "metric", "split", "value"])
        for method, metric, split, value in rows:
            writer.writerow([method, metric, split, repr(float(value))])


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------

@contextmanager
def workspace_lock(workspace: str):
    """Exclusive lock file so only one pipeline runs per workspace."""
    os.makedirs(workspace, exist_ok=True)
    path = os.path.join(workspace, ".lock")
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError as e:
        raise WorkspaceLockedError(f"workspace {workspace} is locked by another pipeline ({path})") from e
    try:
        os.write(fd, str(os.getpid()).encode("ascii"))
        os.close(fd)
        yield
    finally:
        os.remove(path)


@contextmanager
def stage(name: str, artifact: str):
    logger.info(f"[{name}] -> {artifact}")
    try:
        yield
    except StageError:
        raise
    except Exception as e:
        raise StageError(name, artifact, e) from e


@measure_time(logger)
def run_pipeline(config: PipelineConfig, progress: bool = False) -> dict:
    """
    Run every stage on the configured synthetic benchmark.

    Returns:
        dict: Summary with the best fixed threshold, model size, inference
        time and the metric table per method and split

    Raises:
        StageError: Naming the failing stage and its artifact
        WorkspaceLockedError: If another pipeline holds the workspace
    """
    config.validate()
    paths = config.paths
    torch.use_deterministic_algorithms(True)
    with workspace_lock(paths.workspace):
        config.save(paths.resolved_config)
        criterion = config.nms.match_criterion()

        with stage("synth", paths.scenes):
            if config.synth.num_scenes == 0:
                raise CrowdHatError("empty dataset")
            save_scenes(simulate_dataset(config.synth), paths.scenes)
            scenes = load_scenes(paths.scenes)
        splits = {name: [s for s in scenes if split_of(s.id, config.train.seed) == name] for name in SPLITS}
        logger.info(f"Split: {len(splits['train'])} train / {len(splits['val'])} val scenes")

        with stage("compress", paths.features):
            features = compress_scenes(scenes, config.compression, progress)
            write_features(features, paths.features)

        with stage("search", paths.samples):
            samples = build_train_samples(scenes, config, features, progress)
            write_train_samples(samples, paths.samples)
            samples_by_id = {s.scene_id: s for s in samples}

        with stage("train", paths.model):
            if not splits["train"]:
                raise CrowdHatError("empty dataset: no training scenes")
            train_samples = [samples_by_id[s.id] for s in splits["train"]]
            model, curve = train_model(train_samples, config, progress)
            save_model(model, paths.model)
            write_loss_curve(curve, paths.loss_curve)

        with stage("infer", paths.predictions):
            begin = time.perf_counter()
            hat = {name: infer_scenes(splits[name], model, config.compression, config.nms.conf_floor, progress)
                   for name in SPLITS}
            elapsed = time.perf_counter() - begin
            save_predictions(hat["train"] + hat["val"], paths.predictions)

        with stage("eval", paths.metrics):
            threshold = best_fixed_threshold(splits["train"], config.nms.baseline_grid,
                                              config.nms.conf_floor, criterion)
            rows = []
            for name in SPLITS:
                split_scenes = splits[name]
                if not split_scenes:
                    continue
                fixed = baseline_fixed_nms(split_scenes, threshold, config.nms.conf_floor)
                methods = {
                    "fixed_nms": fixed,
                    "oracle_region_nms": oracle_region_predictions(split_scenes, samples_by_id, config.arch.K,
                                                                   config.nms.conf_floor),
                    "hat_region_nms": _hat_region_only(split_scenes, hat[name], config.nms.conf_floor),
                    "hat_count_align": align_predictions(fixed, hat[name], count_from_hat=True),
                    "crowd_hat": hat[name],
                }
                for method in METHODS:
                    for metric, value in evaluate_predictions(methods[method], split_scenes, criterion).items():
                        rows.append((method, metric, name, value))
                label_err = np.mean([np.abs(p.thresholds - samples_by_id[p.id].thresholds).mean() for p in hat[name]])
                n_hat_mae = count_metrics([p.n_hat for p in hat[name]], [s.count for s in split_scenes]).mae
                rows.append(("crowd_hat", "nms_label_mae", name, float(label_err)))
                rows.append(("crowd_hat", "n_hat_mae", name, n_hat_mae))
            write_metrics_csv(rows, paths.metrics)

        summary = {
            "scenes": len(scenes),
            "train_scenes": len(splits["train"]),
            "val_scenes": len(splits["val"]),
            "best_fixed_threshold": threshold,
            "parameters": count_parameters(model),
            "final_train_loss": curve[-1] if curve else None,
            "infer_seconds_per_100_scenes": 100.0 * elapsed / max(len(scenes), 1),
            "metrics": _nest(rows),
        }
        with open(paths.summary, "w", encoding="utf-8") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
        logger.info(f"Pipeline finished, metrics in {paths.metrics}")
        return summary


def _hat_region_only(scenes: Sequence[SceneRecord], hat: Sequence[Prediction], conf_floor: float) -> List[Prediction]:
    """Predicted-threshold region NMS without the count alignment (count = n_c)."""
    out = []
    for s, h in zip(scenes, hat):
        region = RegionThresholds.from_array(int(math.isqrt(len(h.thresholds))), h.thresholds)
        kept = s.box_array[nms_region_indices(s.box_array, region, s.width, s.height, conf_floor)]
        out.append(Prediction(s.id, kept, h.n_hat, len(kept), len(kept), h.thresholds))
    return out


def _nest(rows) -> dict:
    out: dict = {}
    for method, metric, split, value in rows:
        out.setdefault(split, {}).setdefault(method, {})[metric] = value
    return out


SWEEP_PARAMETERS = {
    "S": ("compression", "S"),
    "L": ("compression", "L"),
    "K": ("arch", "K"),
}


def run_sweep(config: PipelineConfig, parameter: str, values: Sequence[int],
              progress: bool = False) -> List[Tuple[str, int, str, float]]:
    """
    One-at-a-time sensitivity sweep over S, L or K.

    Each value runs the full pipeline in its own sub-workspace with the other
    settings untouched; the validation metrics of the full Crowd Hat are
    collected as (parameter, value, metric, metric value) rows.
    """
    if parameter not in SWEEP_PARAMETERS:
        raise CrowdHatError(f"cannot sweep '{parameter}', expected one of {sorted(SWEEP_PARAMETERS)}")
    section, key = SWEEP_PARAMETERS[parameter]
    rows = []
    for value in values:
        cfg = copy.deepcopy(config)
        setattr(getattr(cfg, section), key, int(value))
        cfg.paths.workspace = os.path.join(config.paths.workspace, f"sweep_{parameter}_{value}")
        summary = run_pipeline(cfg, progress)
        split = "val" if "val" in summary["metrics"] else "train"
        for metric, metric_value in sorted(summary["metrics"][split]["crowd_hat"].items()):
            rows.append((parameter, int(value), metric, metric_value))
    os.makedirs(config.paths.workspace, exist_ok=True)
    with open(os.path.join(config.paths.workspace, f"sweep_{parameter}.csv"), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["parameter", "value", "metric", "metric_value"])
        for row in rows:
            writer.writerow([row[0], row[1], row[2], repr(float(row[3]))])
    return rows
