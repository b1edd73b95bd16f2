import numpy as np
import pytest
from hypothesis import settings

from compress import CompressionConfig
from config import PipelineConfig
from core import Detection, SceneRecord
from net import HatArchitecture

settings.register_profile('default', deadline=None, max_examples=50)
settings.load_profile('default')


def tiny_arch(**overrides) -> HatArchitecture:
    """S=8, L=16, K=2 network small enough for finite differences."""
    values = dict(C=2, S=8, L=16, K=2, enc2d=(3, 4), enc1d=(3, 4), local_enc=(3, 4), pn_hidden=5, pc_hidden=5)
    values.update(overrides)
    return HatArchitecture(**values)


def random_boxes(rng: np.random.Generator, n: int, width: float, height: float) -> np.ndarray:
    """(n, 5) boxes with centers anywhere in the frame, edges included."""
    cx = rng.uniform(0, width, n)
    cy = rng.uniform(0, height, n)
    if n >= 2:
        cx[0], cy[-1] = width, height
    w = rng.uniform(1, width / 4, n)
    h = rng.uniform(1, height / 4, n)
    score = rng.normal(0, 2, n)
    return np.column_stack([cx, cy, w, h, score])


def make_scene(scene_id='s', width=100, height=100, points=(), boxes=(), proposals=None) -> SceneRecord:
    return SceneRecord(scene_id, width, height, tuple(tuple(map(float, p)) for p in points),
                       tuple(Detection(*map(float, b)) for b in boxes),
                       None if proposals is None else tuple(Detection(*map(float, b)) for b in proposals))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_config(tmp_path) -> PipelineConfig:
    """Desk-scale pipeline that runs end to end in seconds."""
    cfg = PipelineConfig()
    cfg.synth.num_scenes = 12
    cfg.synth.width = 128
    cfg.synth.height = 96
    cfg.synth.count_range = (5, 40)
    cfg.compression = CompressionConfig(S=8, L=16)
    cfg.arch.K = 2
    cfg.arch.enc2d = (4, 8)
    cfg.arch.enc1d = (4, 8)
    cfg.arch.local_enc = (4, 8)
    cfg.arch.pn_hidden = 8
    cfg.arch.pc_hidden = 8
    cfg.train.epochs = 3
    cfg.train.batch_size = 4
    cfg.train.lr = 1e-3
    cfg.nms.step = 0.1
    cfg.paths.workspace = str(tmp_path / "ws")
    return cfg.validate()
