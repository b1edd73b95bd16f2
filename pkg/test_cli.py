import csv
import os

import pytest

from cli import main
from core import load_scenes

SMALL = ["--set", "compression.S=8", "--set", "compression.L=16", "--set", "arch.K=2",
         "--set", "arch.enc2d=4, 8", "--set", "arch.enc1d=4, 8", "--set", "arch.local_enc=4, 8",
         "--set", "arch.pn_hidden=8", "--set", "arch.pc_hidden=8",
         "--set", "train.epochs=2", "--set", "train.batch_size=4", "--set", "train.lr=0.001",
         "--set", "nms.step=0.1", "--no-progress"]


@pytest.fixture
def scenes_file(tmp_path):
    path = str(tmp_path / "scenes.jsonl")
    code = main(["synth", "--out", path, "--num-scenes", "6", "--width", "128", "--height", "96",
                 "--count-range", "5,30", "--seed", "3"])
    assert code == 0
    return path


def test_synth_flags_reach_the_config(scenes_file):
    scenes = load_scenes(scenes_file)
    assert len(scenes) == 6
    assert all(s.width == 128 and 5 <= s.count <= 30 for s in scenes)


def test_stage_by_stage(tmp_path, scenes_file):
    features = str(tmp_path / "features")
    samples = str(tmp_path / "samples")
    model = str(tmp_path / "model.pt")
    predictions = str(tmp_path / "predictions.jsonl")
    metrics = str(tmp_path / "metrics.csv")
    assert main(["compress", "--scenes", scenes_file, "--out", features] + SMALL) == 0
    assert len(os.listdir(features)) == 6
    assert main(["search", "--scenes", scenes_file, "--out", samples] + SMALL) == 0
    assert main(["train", "--samples", samples, "--out", model, "--curve", str(tmp_path / "loss.csv")] + SMALL) == 0
    assert main(["infer", "--scenes", scenes_file, "--model", model, "--out", predictions] + SMALL) == 0
    assert main(["eval", "--predictions", predictions, "--scenes", scenes_file, "--out", metrics] + SMALL) == 0
    with open(metrics, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert {r["metric"] for r in rows} >= {"mae", "rmse", "f1", "ap"}


def test_dump_features(tmp_path, scenes_file):
    out = str(tmp_path / "dump")
    assert main(["dump-features", "--scenes", scenes_file, "--scene-id", "scene-00000", "--out", out] + SMALL) == 0
    assert sorted(os.listdir(out)) == ["t1d_box_area.csv", "t1d_box_conf.csv", "t2d_box_area.csv",
                                       "t2d_box_conf.csv"]
    assert main(["dump-features", "--scenes", scenes_file, "--scene-id", "missing", "--out", out]) == 1


def test_config_errors_exit_with_two(scenes_file, tmp_path):
    assert main(["compress", "--scenes", scenes_file, "--out", str(tmp_path), "--set", "compression.S=zero"]) == 2
    assert main(["compress", "--scenes", scenes_file, "--out", str(tmp_path), "--set", "bogus.key=1"]) == 2
    assert main(["no-such-command"]) == 2


def test_stage_failure_exits_with_one(tmp_path, caplog):
    code = main(["infer", "--scenes", str(tmp_path / "missing.jsonl"), "--model", "m.pt",
                 "--out", str(tmp_path / "p.jsonl")])
    assert code == 1
    assert "stage 'infer' failed" in caplog.text
