import struct

import numpy as np
import pytest

from binary_protocol import (FEATURE_HEADER, FEATURE_MAGIC, binary_to_dict, binary_to_features, dict_to_binary,
                             features_to_binary)
from compress import CompressionConfig, compress_scene
from conftest import make_scene, random_boxes
from core import ShapeError
from net import TrainSample


@pytest.fixture
def features(rng):
    scene = make_scene(width=120, height=80, boxes=random_boxes(rng, 30, 120, 80))
    return compress_scene(scene, CompressionConfig(S=4, L=8))


def test_feature_layout(features):
    blob = features_to_binary(features)
    assert FEATURE_HEADER.unpack_from(blob) == (FEATURE_MAGIC, 2, 4, 8)
    assert len(blob) == 16 + 8 * (2 * 4 * 4 + 2 * 8)
    first = struct.unpack_from("<d", blob, 16)[0]
    assert first == features.t2d[0, 0, 0]
    # row-major: second value is t2d[0, 0, 1]
    assert struct.unpack_from("<d", blob, 24)[0] == features.t2d[0, 0, 1]


def test_feature_decode_is_bit_exact(features):
    back = binary_to_features(features_to_binary(features))
    np.testing.assert_array_equal(back.t2d, features.t2d)
    np.testing.assert_array_equal(back.t1d, features.t1d)
    assert back.channel_order == features.channel_order


def test_bad_magic_and_truncation(features):
    blob = features_to_binary(features)
    with pytest.raises(ShapeError):
        binary_to_features(b"XXXX" + blob[4:])
    with pytest.raises(ShapeError):
        binary_to_features(blob[:-8])
    with pytest.raises(ShapeError):
        binary_to_features(blob[:6])


def test_train_sample_survives_pickle_codec(features):
    sample = TrainSample("scene-00001", features.t2d, features.t1d, np.linspace(0, 1, 4), 17)
    back = TrainSample.from_dict(binary_to_dict(dict_to_binary(sample.to_dict())))
    assert back.scene_id == sample.scene_id and back.count == 17
    np.testing.assert_array_equal(back.t2d, sample.t2d)
    np.testing.assert_array_equal(back.thresholds, sample.thresholds)
