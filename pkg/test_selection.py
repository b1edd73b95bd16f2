import numpy as np
import pytest
from scipy.special import logit

from core import Detection
from selection import decouple_then_align, round_half_up, selection_indices


def five_boxes():
    return [Detection(10.0 * k, 10.0, 4, 4, float(logit(p))) for k, p in enumerate([0.6, 0.9, 0.5, 0.8, 0.7])]


def test_estimate_above_nms_count_keeps_everything():
    result = decouple_then_align(five_boxes(), 10.0)
    assert result.n_c == 5 and result.n_final == 5 and result.n_hat == 10.0


def test_keeps_top_confidence_boxes():
    result = decouple_then_align(five_boxes(), 3.0)
    assert [round(float(1 / (1 + np.exp(-b.score))), 6) for b in result.boxes] == [0.9, 0.8, 0.7]


def test_zero_estimate_keeps_nothing():
    result = decouple_then_align(five_boxes(), 0.0)
    assert result.boxes == [] and result.n_final == 0


@pytest.mark.parametrize("n_hat, expected", [(2.49, 2), (2.5, 3), (3.5, 4), (0.4, 0)])
def test_rounding_is_half_up(n_hat, expected):
    assert round_half_up(n_hat) == expected
    assert decouple_then_align(five_boxes(), n_hat).n_final == expected


def test_ties_keep_input_order():
    boxes = np.array([[1, 1, 2, 2, 0.5], [2, 2, 2, 2, 0.5], [3, 3, 2, 2, 0.5]])
    np.testing.assert_array_equal(selection_indices(boxes, 2), [0, 1])


def test_array_input_returns_detections():
    arr = np.array([[1, 1, 2, 2, 0.1], [2, 2, 2, 2, 0.9]])
    result = decouple_then_align(arr, 1.0)
    assert result.boxes == [Detection(2.0, 2.0, 2.0, 2.0, 0.9)]
    np.testing.assert_array_equal(result.box_array(), arr[[1]])


def test_negative_estimate_is_rejected():
    with pytest.raises(ValueError):
        decouple_then_align(five_boxes(), -1.0)
