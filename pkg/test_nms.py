import numpy as np
import pytest

from conftest import make_scene, random_boxes
from core import Detection, iou_matrix
from metrics import MatchCriterion
from nms import (RegionThresholds, assign_regions, f1_region, nms_region_adaptive, nms_standard, region_f1_sweep,
                 search_thresholds, threshold_grid)
from synth import SynthConfig, simulate_dataset


def test_single_box_is_kept():
    box = Detection(5, 5, 4, 4, 1.0)
    assert nms_standard([box], 0.5) == [box]


def test_identical_boxes_keep_the_higher_score():
    low, high = Detection(5, 5, 4, 4, 1.0), Detection(5, 5, 4, 4, 2.0)
    assert nms_standard([low, high], 0.5) == [high]


def test_threshold_against_one_third_overlap():
    a, b = Detection(5, 5, 10, 10, 2.0), Detection(10, 5, 10, 10, 1.0)
    assert nms_standard([a, b], 0.5) == [a, b]
    assert nms_standard([a, b], 0.3) == [a]


def test_ties_keep_input_order():
    a, b = Detection(5, 5, 10, 10, 1.0), Detection(5, 5, 10, 10, 1.0)
    assert nms_standard([a, b], 0.5)[0] is a


def test_confidence_floor_drops_boxes_first():
    weak = Detection(5, 5, 4, 4, -2.0)  # sigmoid ~ 0.12
    strong = Detection(50, 50, 4, 4, 0.0)
    assert nms_standard([weak, strong], 0.5, conf_floor=0.3) == [strong]


def test_threshold_one_keeps_everything(rng):
    boxes = random_boxes(rng, 30, 100, 100)
    assert len(nms_standard(boxes, 1.0)) == 30


def test_empty_input():
    assert nms_standard([], 0.5) == []
    assert nms_region_adaptive(np.zeros((0, 5)), RegionThresholds(2, (0.5,) * 4), 100, 100).shape == (0, 5)


def test_kept_boxes_overlap_at_most_threshold(rng):
    boxes = random_boxes(rng, 80, 100, 100)
    kept = nms_standard(boxes, 0.4)
    overlaps = iou_matrix(kept, kept)
    np.fill_diagonal(overlaps, 0.0)
    assert overlaps.max() <= 0.4


def test_region_indexing():
    points = np.array([[10, 10], [90, 10], [10, 90], [90, 90], [100, 100]])
    np.testing.assert_array_equal(assign_regions(points, 100, 100, 2), [0, 1, 2, 3, 3])


def test_one_region_equals_standard_nms(rng):
    boxes = random_boxes(rng, 60, 100, 100)
    region = nms_region_adaptive(boxes, RegionThresholds(1, (0.35,)), 100, 100, conf_floor=0.3)
    np.testing.assert_array_equal(region, nms_standard(boxes, 0.35, conf_floor=0.3))


def test_equal_thresholds_in_one_occupied_region(rng):
    boxes = random_boxes(rng, 40, 40, 40)
    region = nms_region_adaptive(boxes, RegionThresholds(2, (0.5,) * 4), 100, 100, conf_floor=0.0)
    np.testing.assert_array_equal(region, nms_standard(boxes, 0.5))


def test_dense_region_drops_more_duplicates():
    def duplicated(cx, cy):
        return [(cx, cy, 10, 10, 2.0), (cx + 2, cy, 10, 10, 1.5), (cx, cy + 2, 10, 10, 1.0)]
    boxes = np.array(duplicated(20, 20) + duplicated(30, 30) + duplicated(70, 20) + duplicated(80, 30))
    thresholds = RegionThresholds(2, (0.1, 0.9, 0.5, 0.5))
    kept = nms_region_adaptive(boxes, thresholds, 100, 100, conf_floor=0.0)
    regions = assign_regions(kept, 100, 100, 2)
    assert (regions == 0).sum() < (regions == 1).sum()


def test_region_thresholds_validation():
    with pytest.raises(ValueError):
        RegionThresholds(2, (0.5,) * 3)
    with pytest.raises(ValueError):
        RegionThresholds(1, (1.5,))


def test_grid_includes_both_ends():
    grid = threshold_grid(0.01)
    assert len(grid) == 101 and grid[0] == 0.0 and grid[-1] == 1.0
    np.testing.assert_array_equal(threshold_grid(0.3), [0.0, 0.3, 0.6, 0.9, 1.0])


def test_empty_region_counts_as_perfect():
    assert f1_region(np.zeros((0, 5)), np.zeros((0, 2)), 0, MatchCriterion.distance(), 100, 100, 2) == 1.0


def test_lone_true_box_resolves_to_zero():
    scene = make_scene(width=100, height=100, points=[(20, 20), (80, 80)],
                       boxes=[(20, 20, 10, 10, 2.0), (80, 80, 10, 10, 2.0)])
    thresholds = search_thresholds(scene, 2, 0.1, MatchCriterion.distance(5.0))
    assert thresholds.values == (0.0,) * 4


def test_overlapping_pair_prefers_suppression():
    # Two detections of one person at IoU 0.6: F1 is 1 below 0.6 and 2/3 from 0.6 on
    a = (20.0, 20.0, 10.0, 10.0, 2.0)
    b = (22.5, 20.0, 10.0, 10.0, 1.0)
    scene = make_scene(width=100, height=100, points=[(20, 20)], boxes=[a, b])
    sweep = region_f1_sweep(scene, 1, threshold_grid(0.05), MatchCriterion.distance(5.0))
    grid = threshold_grid(0.05)
    np.testing.assert_allclose(sweep[0, grid < 0.6], 1.0)
    np.testing.assert_allclose(sweep[0, grid >= 0.6], 2 / 3)
    assert search_thresholds(scene, 1, 0.05, MatchCriterion.distance(5.0)).values == (0.0,)


def brute_force_sweep(scene, K, grid, criterion, conf_floor):
    out = np.empty((K * K, len(grid)))
    for g, t in enumerate(grid):
        kept = nms_region_adaptive(scene.box_array, RegionThresholds(K, (t,) * (K * K)), scene.width,
                                   scene.height, conf_floor)
        for r in range(K * K):
            out[r, g] = f1_region(kept, scene.point_array, r, criterion, scene.width, scene.height, K)
    return out


def test_search_attains_brute_force_maximum():
    cfg = SynthConfig(num_scenes=100, width=128, height=96, count_range=(3, 25))
    criterion = MatchCriterion.distance()
    grid = threshold_grid(0.05)
    for scene in simulate_dataset(cfg):
        brute = brute_force_sweep(scene, 2, grid, criterion, 0.3)
        np.testing.assert_array_equal(region_f1_sweep(scene, 2, grid, criterion, 0.3), brute)
        found = search_thresholds(scene, 2, 0.05, criterion, 0.3).as_array()
        best = grid[np.argmax(brute, axis=1)]
        np.testing.assert_array_equal(found, best)


def test_kept_count_grows_for_isolated_pairs(rng):
    # Disjoint pairs never chain, so raising the threshold can only keep more
    for _ in range(200):
        pairs = []
        for k in range(int(rng.integers(1, 8))):
            cx, offset = 30.0 * k + 10, rng.uniform(0, 10)
            pairs += [(cx, 10, 10, 10, rng.normal()), (cx + offset, 10, 10, 10, rng.normal())]
        boxes = np.array(pairs)
        counts = [len(nms_standard(boxes, t)) for t in threshold_grid(0.05)]
        assert counts == sorted(counts)


def test_greedy_kept_count_can_fall_as_threshold_rises():
    # B overlaps A a little and C, D a lot; C and D only touch each other
    a = Detection(1.0, 1.25, 2.0, 0.5, 4.0)
    b = Detection(1.0, 0.6, 2.0, 1.2, 3.0)
    c = Detection(0.5, 0.5, 1.0, 1.0, 2.0)
    d = Detection(1.5, 0.5, 1.0, 1.0, 1.0)
    assert nms_standard([a, b, c, d], 0.1) == [a, c, d]
    assert nms_standard([a, b, c, d], 0.4) == [a, b]


def test_searched_thresholds_beat_every_fixed_threshold_per_region():
    cfg = SynthConfig(num_scenes=30, width=128, height=96, count_range=(5, 40), seed=3)
    criterion = MatchCriterion.distance()
    grid = threshold_grid(0.05)
    K = 2
    for scene in simulate_dataset(cfg):
        searched = search_thresholds(scene, K, 0.05, criterion, 0.3)
        kept = nms_region_adaptive(scene.box_array, searched, scene.width, scene.height, 0.3)
        fixed = brute_force_sweep(scene, K, grid, criterion, 0.3)
        for r in range(K * K):
            adaptive = f1_region(kept, scene.point_array, r, criterion, scene.width, scene.height, K)
            assert adaptive >= fixed[r].max()
