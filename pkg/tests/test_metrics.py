import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from maskmatch.masks import BinaryMask
from maskmatch.metrics import Metric, binary_overlap, overlap_score, soft_iou

DIMS = (6, 7)

prob_maps = arrays(
    dtype=np.float64,
    shape=DIMS,
    elements=st.floats(0.0, 1.0, allow_nan=False, width=64),
)
bool_maps = arrays(dtype=bool, shape=DIMS)


def test_both_empty_convention():
    empty = BinaryMask.zeros(*DIMS)
    assert soft_iou(np.zeros(DIMS), empty) == 1.0
    assert binary_overlap(empty, empty, Metric.BINARY_IOU) == 1.0
    assert binary_overlap(empty, empty, Metric.DICE) == 1.0


@given(prob_maps, bool_maps)
def test_soft_iou_bounds(p, m):
    v = soft_iou(p, BinaryMask(m))
    assert 0.0 <= v <= 1.0


@given(bool_maps, bool_maps)
def test_soft_iou_equals_binary_iou_on_binary_input(a, b):
    got = soft_iou(a.astype(np.float64), BinaryMask(b))
    want = binary_overlap(BinaryMask(a), BinaryMask(b), Metric.BINARY_IOU)
    assert got == pytest.approx(want, abs=1e-12)


@given(prob_maps, bool_maps, bool_maps)
def test_one_minus_soft_iou_satisfies_triangle_inequality(p, m1, m2):
    # 1 - soft_iou is a metric over nonnegative maps, so any triple obeys it
    a, b, c = p, m1.astype(np.float64), m2.astype(np.float64)
    d_ab = 1.0 - soft_iou(a, BinaryMask(m1))
    d_bc = 1.0 - soft_iou(b, BinaryMask(m2))
    d_ac = 1.0 - soft_iou(a, BinaryMask(m2))
    assert d_ac <= d_ab + d_bc + 1e-9
    assert c.shape == DIMS


@given(bool_maps, bool_maps)
def test_dice_relates_to_iou(a, b):
    iou = binary_overlap(BinaryMask(a), BinaryMask(b), Metric.BINARY_IOU)
    dice = binary_overlap(BinaryMask(a), BinaryMask(b), Metric.DICE)
    assert dice == pytest.approx(2.0 * iou / (1.0 + iou), abs=1e-12)
    assert dice >= iou - 1e-12


def test_overlap_score_thresholds_probabilities_for_binary_metrics():
    p = np.full(DIMS, 0.6)
    m = BinaryMask.ones(*DIMS)
    assert overlap_score(p, m, Metric.BINARY_IOU) == 1.0
    assert overlap_score(p, m, Metric.SOFT_IOU) == pytest.approx(0.6)
    low = np.full(DIMS, 0.4)
    assert overlap_score(low, m, Metric.BINARY_IOU) == 0.0


def test_soft_iou_known_value():
    p = np.zeros(DIMS)
    p[0, :] = 0.5
    m = np.zeros(DIMS, dtype=bool)
    m[0, :] = True
    # min sums to 0.5 * w, max sums to 1.0 * w
    assert soft_iou(p, BinaryMask(m)) == pytest.approx(0.5)
