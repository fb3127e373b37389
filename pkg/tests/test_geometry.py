import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from matchfree.geometry import (
    Box,
    BoxError,
    from_corners,
    giou,
    giou_grad,
    giou_loss,
    iou,
    l1_cost,
    pairwise_giou,
    pairwise_iou,
    pairwise_l1,
    to_corners,
)


def giou_oracle(b, g):
    """Plain-float GIoU from corner arithmetic."""
    bx1, by1, bx2, by2 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    gx1, gy1, gx2, gy2 = g[0] - g[2] / 2, g[1] - g[3] / 2, g[0] + g[2] / 2, g[1] + g[3] / 2
    iw = max(0.0, min(bx2, gx2) - max(bx1, gx1))
    ih = max(0.0, min(by2, gy2) - max(by1, gy1))
    inter = iw * ih
    union = b[2] * b[3] + g[2] * g[3] - inter
    encl = (max(bx2, gx2) - min(bx1, gx1)) * (max(by2, gy2) - min(by1, gy1))
    return inter / union - (encl - union) / encl


boxes = st.tuples(
    st.floats(0.05, 0.95), st.floats(0.05, 0.95), st.floats(0.01, 0.6), st.floats(0.01, 0.6)
)


def test_to_corners_unit_box():
    assert Box(0.5, 0.5, 1, 1).to_corners() == (0.0, 0.0, 1.0, 1.0)


def test_to_corners_degenerate_point():
    assert Box(0.5, 0.5, 0, 0).to_corners() == (0.5, 0.5, 0.5, 0.5)


def test_corner_round_trip():
    c = np.random.default_rng(0).uniform(0, 1, size=(50, 4))
    c[:, 2:] = c[:, :2] + np.abs(c[:, 2:])
    np.testing.assert_allclose(to_corners(from_corners(c)), c, atol=1e-12)


def test_negative_extent_rejected():
    with pytest.raises(BoxError):
        Box(0.5, 0.5, -0.1, 0.2)
    with pytest.raises(BoxError):
        to_corners([0.5, 0.5, 0.1, -1.0])
    with pytest.raises(BoxError):
        from_corners([0.6, 0.0, 0.5, 1.0])


def test_l1_identical_and_shift():
    assert l1_cost([0.5, 0.5, 0.2, 0.2], [0.5, 0.5, 0.2, 0.2]) == 0.0
    assert l1_cost([0.5, 0.5, 0.2, 0.2], [0.6, 0.5, 0.2, 0.2]) == pytest.approx(0.1, abs=1e-15)


def test_pairwise_l1_matches_per_coordinate_sum():
    rng = np.random.default_rng(1)
    g, p = rng.uniform(0.1, 0.5, (3, 4)), rng.uniform(0.1, 0.5, (5, 4))
    m = pairwise_l1(g, p)
    for i in range(3):
        for j in range(5):
            assert m[i, j] == pytest.approx(sum(abs(p[j, k] - g[i, k]) for k in range(4)), abs=1e-15)


def test_giou_identical():
    assert giou([0.3, 0.4, 0.2, 0.1], [0.3, 0.4, 0.2, 0.1]) == pytest.approx(1.0, abs=1e-15)
    assert giou_loss([0.3, 0.4, 0.2, 0.1], [0.3, 0.4, 0.2, 0.1]) == pytest.approx(0.0, abs=1e-15)


def test_giou_disjoint_hand_value():
    a = Box.from_corners(0, 0, 1, 1)
    b = Box.from_corners(2, 2, 3, 3)
    assert giou(a, b) == pytest.approx(-7 / 9, abs=1e-12)


def test_giou_nested_quarter():
    outer = Box.from_corners(0, 0, 2, 2)
    inner = Box.from_corners(0, 0, 1, 1)
    assert giou(inner, outer) == pytest.approx(0.25, abs=1e-12)
    assert iou(inner, outer) == pytest.approx(0.25, abs=1e-12)


def test_giou_degenerate_coincident_is_zero():
    p = [0.5, 0.5, 0.0, 0.0]
    assert giou(p, p) == 0.0
    np.testing.assert_array_equal(giou_grad(p, p), 0.0)


@settings(max_examples=300, deadline=None)
@given(boxes, boxes)
def test_giou_matches_oracle_and_range(b, g):
    v = giou(b, g)
    assert -1.0 <= v <= 1.0
    assert v == pytest.approx(giou_oracle(b, g), abs=1e-12)
    assert 0.0 <= giou_loss(b, g) <= 2.0


@settings(max_examples=200, deadline=None)
@given(boxes, boxes)
def test_giou_grad_matches_finite_differences(b, g):
    b = np.array(b)
    h = 1e-7
    num = np.zeros(4)
    for k in range(4):
        bp, bm = b.copy(), b.copy()
        bp[k] += h
        bm[k] -= h
        num[k] = (giou_loss(bp, g) - giou_loss(bm, g)) / (2 * h)
    ana = giou_grad(b, g)
    # kinks where an edge of b meets an edge of g are measure-zero; skip them
    pc, gc = to_corners(b), to_corners(np.array(g))
    if np.min(np.abs(pc[:, None] - gc[None, :])) < 1e-5:
        return
    np.testing.assert_allclose(ana, num, atol=1e-6)


def test_pairwise_giou_agrees_with_scalar():
    rng = np.random.default_rng(4)
    g = np.c_[rng.uniform(0.2, 0.8, (4, 2)), rng.uniform(0.05, 0.4, (4, 2))]
    p = np.c_[rng.uniform(0.2, 0.8, (6, 2)), rng.uniform(0.05, 0.4, (6, 2))]
    vals, grads = pairwise_giou(g, p, with_grad=True)
    assert vals.shape == (4, 6) and grads.shape == (4, 6, 4)
    for i in range(4):
        for j in range(6):
            assert vals[i, j] == pytest.approx(giou(p[j], g[i]), abs=1e-14)
            np.testing.assert_allclose(-grads[i, j], giou_grad(p[j], g[i]), atol=1e-14)


def test_pairwise_iou_agrees_with_scalar():
    rng = np.random.default_rng(5)
    g = np.c_[rng.uniform(0.2, 0.8, (3, 2)), rng.uniform(0.05, 0.4, (3, 2))]
    p = np.c_[rng.uniform(0.2, 0.8, (5, 2)), rng.uniform(0.05, 0.4, (5, 2))]
    m = pairwise_iou(g, p)
    for i in range(3):
        for j in range(5):
            assert m[i, j] == pytest.approx(iou(g[i], p[j]), abs=1e-14)
