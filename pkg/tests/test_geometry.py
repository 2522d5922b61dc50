from dataclasses import dataclass

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from odextract.geometry import BBox, area, intersection, iou, nms, scale_box

from oracles import frac_iou, naive_nms


@dataclass
class Det:
    box: BBox
    category: int
    confidence: float


coord = st.floats(-50, 50, allow_nan=False, allow_infinity=False)
side = st.floats(0, 40, allow_nan=False, allow_infinity=False)


@st.composite
def boxes(draw, min_side=0.0):
    x, y = draw(coord), draw(coord)
    w = draw(st.floats(min_side, 40, allow_nan=False))
    h = draw(st.floats(min_side, 40, allow_nan=False))
    return BBox(x, y, x + w, y + h)


def test_identical_boxes():
    b = BBox(1, 2, 5, 7)
    assert iou(b, b) == 1.0


def test_disjoint_boxes():
    assert iou(BBox(0, 0, 1, 1), BBox(2, 2, 3, 3)) == 0.0


def test_touching_edges_do_not_intersect():
    assert intersection(BBox(0, 0, 1, 1), BBox(1, 0, 2, 1)) == 0.0


def test_one_seventh():
    assert iou(BBox(0, 0, 2, 2), BBox(1, 1, 3, 3)) == pytest.approx(1 / 7, abs=1e-15)


def test_degenerate_union_is_zero():
    p = BBox(3, 3, 3, 3)
    assert area(p) == 0
    assert iou(p, p) == 0.0


@pytest.mark.parametrize("coords", [(0, 0, -1, 1), (0, 2, 1, 1), (float("nan"), 0, 1, 1),
                                    (0, 0, float("inf"), 1)])
def test_invalid_boxes_rejected(coords):
    with pytest.raises(ValueError):
        BBox(*coords)


def test_scale_examples():
    b = BBox(0, 0, 2, 2)
    assert scale_box(b, 1.0) == b
    assert scale_box(b, 0.5) == BBox(0, 0, 1, 1)


@pytest.mark.parametrize("s", [0.0, -1.0, float("nan"), float("inf")])
def test_scale_rejects_bad_factor(s):
    with pytest.raises(ValueError):
        scale_box(BBox(0, 0, 1, 1), s)


@given(boxes(), boxes())
def test_iou_symmetric_and_bounded(a, b):
    v = iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx(iou(b, a), abs=1e-12)


@given(boxes(min_side=1e-3))
def test_iou_self_is_one(b):
    assert iou(b, b) == pytest.approx(1.0, abs=1e-12)


@given(boxes(), st.floats(0.05, 20, allow_nan=False))
def test_scale_inverse(b, s):
    back = scale_box(scale_box(b, s), 1 / s)
    assert np.allclose(back.as_tuple(), b.as_tuple(), atol=1e-9)


@given(boxes(min_side=1e-2), boxes(min_side=1e-2), st.floats(0.1, 10))
def test_iou_scale_invariant(a, b, s):
    assert iou(scale_box(a, s), scale_box(b, s)) == pytest.approx(iou(a, b), abs=1e-9)


def test_iou_matches_exact_rationals():
    rng = np.random.default_rng(0)
    for _ in range(500):
        a = [float(v) for v in rng.integers(0, 64, 4) / 8]
        b = [float(v) for v in rng.integers(0, 64, 4) / 8]
        a = [min(a[0], a[2]), min(a[1], a[3]), max(a[0], a[2]), max(a[1], a[3])]
        b = [min(b[0], b[2]), min(b[1], b[3]), max(b[0], b[2]), max(b[1], b[3])]
        assert abs(iou(BBox(*a), BBox(*b)) - float(frac_iou(a, b))) < 1e-12


def test_nms_hand_trace():
    a = Det(BBox(0, 0, 10, 10), 0, 0.9)
    b = Det(BBox(0, 0, 10, 9), 0, 0.8)  # IoU 0.9 with a
    assert iou(a.box, b.box) == pytest.approx(0.9)
    assert nms([b, a], 0.5) == [a]


def test_nms_classwise():
    a = Det(BBox(0, 0, 10, 10), 0, 0.9)
    b = Det(BBox(0, 0, 10, 10), 1, 0.8)
    assert nms([a, b], 0.5) == [a, b]


def test_nms_empty():
    assert nms([], 0.5) == []


@st.composite
def det_sets(draw):
    n = draw(st.integers(0, 12))
    return [Det(draw(boxes()), draw(st.integers(0, 2)), draw(st.floats(0, 1))) for _ in range(n)]


@settings(max_examples=200)
@given(det_sets(), st.floats(0.1, 0.9))
def test_nms_postconditions(dets, t):
    kept = nms(dets, t)
    assert all(any(k is d for d in dets) for k in kept)
    for i, a in enumerate(kept):
        for b in kept[i + 1:]:
            if a.category == b.category:
                assert iou(a.box, b.box) < t
    # every dropped detection is covered by a kept one of its class
    for d in dets:
        if not any(k is d for k in kept):
            assert any(k.category == d.category and iou(k.box, d.box) >= t
                       and k.confidence >= d.confidence for k in kept)
    assert nms(kept, t) == kept


def test_nms_matches_naive_reference():
    rng = np.random.default_rng(1)
    for _ in range(300):
        n = int(rng.integers(0, 10))
        raw = []
        for _ in range(n):
            x, y = rng.integers(0, 40, 2) / 4
            w, h = rng.integers(1, 40, 2) / 4
            raw.append(((x, y, x + w, y + h), int(rng.integers(0, 3)), float(rng.random())))
        dets = [Det(BBox(*b), c, s) for b, c, s in raw]
        got = [(d.box.as_tuple(), d.category, d.confidence) for d in nms(dets, 0.5)]
        assert got == [(tuple(b), c, s) for b, c, s in naive_nms(raw, 0.5)]
