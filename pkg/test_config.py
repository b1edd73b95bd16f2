import os

import pytest

from config import PipelineConfig
from core import ConfigError


def test_defaults():
    cfg = PipelineConfig().validate()
    assert (cfg.compression.S, cfg.compression.L, cfg.arch.K) == (64, 256, 4)
    assert (cfg.train.batch_size, cfg.train.lr, cfg.train.epochs) == (16, 1e-5, 100)
    assert cfg.nms.step == 0.01
    assert (cfg.arch.C, cfg.arch.S, cfg.arch.L) == (2, 64, 256)


def test_overrides_are_typed():
    cfg = PipelineConfig.load(overrides=[
        "compression.S=32", "arch.K=2", "train.lr=0.001", "compression.two_stage=true",
        "synth.count_range=5, 50", "nms.sigma_dist=none", "arch.feature_channels=box_conf"])
    assert cfg.compression.S == 32 and cfg.arch.S == 32
    assert cfg.arch.K == 2
    assert cfg.train.lr == 1e-3
    assert cfg.compression.two_stage and cfg.arch.C == 4
    assert cfg.synth.count_range == (5, 50)
    assert cfg.nms.sigma_dist is None
    assert cfg.arch.feature_channels == ("box_conf",)


@pytest.mark.parametrize("override", [
    "nope.key=1", "train.nope=1", "train.epochs=many", "arch.S=32", "train", "compression.two_stage=maybe"])
def test_bad_overrides(override):
    with pytest.raises(ConfigError):
        PipelineConfig.load(overrides=[override])


def test_validation_runs_on_load():
    with pytest.raises(ConfigError):
        PipelineConfig.load(overrides=["arch.K=5"])
    with pytest.raises(ConfigError):
        PipelineConfig.load(overrides=["train.mode=both"])


def test_ini_round_trip(tmp_path):
    cfg = PipelineConfig.load(overrides=["train.lr=0.003", "nms.baseline_grid=0.2, 0.4", "synth.seed=11"])
    path = tmp_path / "config.ini"
    cfg.save(str(path))
    again = PipelineConfig.load(str(path))
    assert again == cfg
    assert again.to_ini() == cfg.to_ini()


def test_file_then_flags(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text("[train]\nepochs = 7\nlr = 0.01\n\n[compression]\nS = 16\n")
    cfg = PipelineConfig.load(str(path), ["train.epochs=9"])
    assert cfg.train.epochs == 9 and cfg.train.lr == 0.01 and cfg.compression.S == 16


def test_missing_file():
    with pytest.raises(ConfigError):
        PipelineConfig.load("/nonexistent/config.ini")


def test_shipped_benchmark_config():
    cfg = PipelineConfig.load(os.path.join(os.path.dirname(__file__), "configs", "synthetic_benchmark.ini"))
    assert cfg.train.lr == 1e-3 and cfg.train.epochs == 40
