import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import make_scene, random_boxes
from core import (Detection, LoadStats, SceneFormatError, SceneRecord, iou, iou_matrix, load_scenes,
                  save_scenes, scene_to_dict)

box_strategy = st.builds(
    Detection,
    st.floats(0, 500), st.floats(0, 500), st.floats(0.5, 100), st.floats(0.5, 100), st.floats(-5, 5))


def test_iou_identity():
    box = Detection(10, 10, 4, 6, 0.3)
    assert iou(box, box) == pytest.approx(1.0)


def test_iou_half_overlap():
    assert iou(Detection(5, 5, 10, 10, 0), Detection(10, 5, 10, 10, 0)) == pytest.approx(1 / 3)


def test_iou_disjoint():
    assert iou(Detection(0, 0, 10, 10, 0), Detection(100, 0, 10, 10, 0)) == 0.0


@given(box_strategy, box_strategy)
def test_iou_symmetric_and_bounded(a, b):
    value = iou(a, b)
    assert value == pytest.approx(iou(b, a))
    assert 0.0 <= value <= 1.0


def test_iou_matrix_empty():
    assert iou_matrix(np.zeros((0, 4)), np.ones((3, 4))).shape == (0, 3)


def test_detection_rejects_non_positive_size():
    with pytest.raises(ValueError):
        Detection(0, 0, 0, 5, 1.0)


def test_load_empty_file(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    assert load_scenes(str(path)) == []


def test_load_scene_without_points_or_boxes(tmp_path):
    path = tmp_path / "one.jsonl"
    path.write_text(json.dumps({"id": "a", "width": 10, "height": 10, "points": [], "boxes": []}) + "\n")
    scenes = load_scenes(str(path))
    assert len(scenes) == 1
    assert scenes[0].count == 0
    assert scenes[0].box_array.shape == (0, 5)


def test_round_trip_is_fixpoint(tmp_path, rng):
    scenes = []
    for k in range(100):
        n = int(rng.integers(0, 8))
        scenes.append(make_scene(f"scene-{k}", 200, 150,
                                 points=rng.uniform(0, 150, (n, 2)),
                                 boxes=random_boxes(rng, int(rng.integers(0, 8)), 200, 150)))
    path = tmp_path / "scenes.jsonl"
    save_scenes(scenes, str(path))
    loaded = load_scenes(str(path))
    assert [scene_to_dict(s) for s in loaded] == [scene_to_dict(s) for s in scenes]
    save_scenes(loaded, str(tmp_path / "again.jsonl"))
    assert (tmp_path / "again.jsonl").read_bytes() == path.read_bytes()


def test_out_of_frame_coordinates_are_clamped(tmp_path):
    path = tmp_path / "clamp.jsonl"
    path.write_text(json.dumps({"id": "c", "width": 10, "height": 10,
                                "points": [[-1, 5], [3, 12]], "boxes": [[11, 5, 2, 2, 0.0]]}) + "\n")
    stats = LoadStats()
    scene, = load_scenes(str(path), stats)
    assert scene.points == ((0.0, 5.0), (3.0, 10.0))
    assert scene.boxes[0].cx == 10.0
    assert stats.clamped == 3
    assert stats.clamped_scene_ids == ["c"]


@pytest.mark.parametrize("line", [
    "not json",
    json.dumps({"width": 10, "height": 10}),
    json.dumps({"id": "x", "width": 10, "height": 10, "boxes": [[1, 2, 3]]}),
    json.dumps({"id": "x", "width": 10, "height": 10, "boxes": [[1, 2, -3, 4, 0]]}),
    json.dumps({"id": "x", "width": 10, "height": 10, "points": [5]}),
    json.dumps({"id": "x", "width": 10, "height": 10, "points": [["a", 1]]}),
    json.dumps({"id": "x", "width": 10, "height": 10, "boxes": [[1, 2, "a", 4, 0]]}),
    json.dumps({"id": "x", "width": 10, "height": 10, "boxes": 7}),
    json.dumps({"id": "x", "width": 10, "height": 10, "proposals": [None]}),
])
def test_malformed_line_reports_line_number(tmp_path, line):
    path = tmp_path / "bad.jsonl"
    path.write_text(json.dumps({"id": "ok", "width": 5, "height": 5}) + "\n\n" + line + "\n")
    with pytest.raises(SceneFormatError) as info:
        load_scenes(str(path))
    assert info.value.line_number == 3


def test_without_points_keeps_detections():
    scene = make_scene(points=[(1, 1)], boxes=[(1, 1, 2, 2, 0.5)], proposals=[(1, 1, 3, 3, 0.1)])
    stripped = scene.without_points()
    assert isinstance(stripped, SceneRecord)
    assert stripped.count == 0
    assert stripped.boxes == scene.boxes
    assert stripped.proposals == scene.proposals
