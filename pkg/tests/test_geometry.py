import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from optibox.errors import InvalidBoxError, OutOfBoundsError
from optibox.geometry import (
    Box,
    BoxOffset,
    best_target_proposal,
    boxes_to_array,
    clip_box,
    decode_offset,
    encode_offset,
    image_bounds,
    iou,
    pairwise_iou,
    union_box,
)

from oracles import decode_oracle, encode_oracle, iou_oracle, union_oracle

coord = st.floats(-50.0, 150.0)
extent = st.floats(0.5, 80.0)
boxes = st.builds(Box, coord, coord, extent, extent)


def test_box_validation():
    with pytest.raises(InvalidBoxError):
        Box(0, 0, 0.0, 1.0)
    with pytest.raises(InvalidBoxError):
        Box(0, 0, 1.0, -2.0)
    with pytest.raises(InvalidBoxError):
        Box(float("nan"), 0, 1.0, 1.0)
    with pytest.raises(InvalidBoxError):
        BoxOffset(0.0, float("inf"), 0.0, 0.0)


def test_corner_round_trip():
    b = Box(12.0, 7.5, 3.0, 9.0)
    assert Box.from_corners(*b.corners()) == b
    assert b.area == pytest.approx(27.0)


def test_iou_known_case():
    # Unit squares overlapping in a 0.5x0.5 patch: inter 0.25, union 1.75.
    a = Box(0.5, 0.5, 1.0, 1.0)
    b = Box(1.0, 1.0, 1.0, 1.0)
    assert iou(a, b) == pytest.approx(0.25 / 1.75)
    assert iou(a, b) == pytest.approx(1.0 / 7.0)


def test_iou_disjoint_and_identical():
    a = Box(0.0, 0.0, 2.0, 2.0)
    assert iou(a, Box(10.0, 0.0, 2.0, 2.0)) == 0.0
    assert iou(a, a) == pytest.approx(1.0)
    # Merely touching edges count as zero overlap.
    assert iou(a, Box(2.0, 0.0, 2.0, 2.0)) == 0.0


def test_iou_containment():
    outer = Box(0.0, 0.0, 4.0, 4.0)
    inner = Box(0.0, 0.0, 2.0, 2.0)
    assert iou(outer, inner) == pytest.approx(4.0 / 16.0)


@settings(max_examples=200, deadline=None)
@given(boxes, boxes)
def test_iou_properties(a, b):
    v = iou(a, b)
    assert 0.0 <= v <= 1.0 + 1e-12
    assert v == pytest.approx(iou(b, a))
    assert v == pytest.approx(iou_oracle(a.astuple(), b.astuple()))


@settings(max_examples=200, deadline=None)
@given(boxes, boxes)
def test_codec_round_trip_property(r, g):
    t = encode_offset(r, g)
    back = decode_offset(r, t)
    for got, want in zip(back.astuple(), g.astuple()):
        assert got == pytest.approx(want, abs=1e-9)


def test_codec_known_values():
    r = Box(10.0, 10.0, 4.0, 10.0)
    g = Box(11.0, 9.0, 8.0, 5.0)
    t = encode_offset(r, g)
    assert t.tx == pytest.approx(0.25)
    assert t.ty == pytest.approx(-0.1)
    assert t.tw == pytest.approx(math.log(2.0))
    assert t.th == pytest.approx(-math.log(2.0))
    assert t.astuple() == pytest.approx(encode_oracle(r.astuple(), g.astuple()))


def test_decode_matches_oracle():
    r = Box(5.0, 6.0, 2.0, 3.0)
    t = BoxOffset(0.5, -0.25, 0.1, -0.2)
    got = decode_offset(r, t)
    assert got.astuple() == pytest.approx(decode_oracle(r.astuple(), t.astuple()))


def test_zero_offset_is_identity():
    r = Box(3.0, 4.0, 5.0, 6.0)
    back = decode_offset(r, BoxOffset(0.0, 0.0, 0.0, 0.0))
    assert back.astuple() == pytest.approx(r.astuple())


def test_pairwise_matches_scalar(rng):
    n, m = 7, 5
    a = [Box(*c) for c in np.c_[rng.uniform(0, 100, (n, 2)), rng.uniform(1, 40, (n, 2))]]
    b = [Box(*c) for c in np.c_[rng.uniform(0, 100, (m, 2)), rng.uniform(1, 40, (m, 2))]]
    mat = pairwise_iou(boxes_to_array(a), boxes_to_array(b))
    assert mat.shape == (n, m)
    for i in range(n):
        for j in range(m):
            assert mat[i, j] == pytest.approx(iou(a[i], b[j]), abs=1e-12)


def test_pairwise_rejects_bad_arrays():
    with pytest.raises(ValueError):
        pairwise_iou(np.zeros((3, 3)), np.zeros((2, 4)))
    bad = np.array([[0.0, 0.0, -1.0, 2.0]])
    with pytest.raises(InvalidBoxError):
        pairwise_iou(bad, bad)


def test_best_target_proposal_selection():
    gt = Box(10.0, 10.0, 10.0, 10.0)
    proposals = [
        Box(30.0, 30.0, 10.0, 10.0),  # disjoint
        Box(11.0, 10.0, 10.0, 10.0),  # high overlap
        Box(12.0, 12.0, 10.0, 10.0),  # lower overlap
    ]
    assert best_target_proposal(proposals, gt) == 1
    # Raising the threshold above the best IoU yields None.
    assert best_target_proposal(proposals, gt, threshold=0.99) is None
    with pytest.raises(ValueError):
        best_target_proposal(proposals, gt, threshold=0.0)
    with pytest.raises(ValueError):
        best_target_proposal(proposals, gt, threshold=1.5)


def test_best_target_tie_breaks_low():
    gt = Box(0.0, 0.0, 2.0, 2.0)
    same = Box(0.5, 0.0, 2.0, 2.0)
    assert best_target_proposal([same, same, same], gt) == 0


def test_best_target_strict_vs_inclusive():
    gt = Box(0.0, 0.0, 2.0, 2.0)
    # Exact IoU 0.5 in floats: a contained 2x1 box gives inter 2 over union 4.
    p = Box(0.0, 0.0, 2.0, 1.0)
    assert iou(p, gt) == 0.5
    assert best_target_proposal([p], gt, threshold=0.5) == 0
    assert best_target_proposal([p], gt, threshold=0.5, strict=True) is None


def test_clip_box():
    bounds = image_bounds(100.0, 50.0)
    clipped = clip_box(Box(98.0, 25.0, 10.0, 10.0), bounds)
    x1, y1, x2, y2 = clipped.corners()
    assert x2 == pytest.approx(100.0) and x1 == pytest.approx(93.0)
    inside = Box(50.0, 25.0, 10.0, 10.0)
    assert clip_box(inside, bounds).astuple() == pytest.approx(inside.astuple())
    with pytest.raises(OutOfBoundsError):
        clip_box(Box(200.0, 25.0, 10.0, 10.0), bounds)


def test_union_box_matches_oracle():
    a = Box(0.0, 0.0, 2.0, 2.0)
    b = Box(5.0, 1.0, 4.0, 2.0)
    got = union_box([a, b])
    assert got.astuple() == pytest.approx(union_oracle(a.astuple(), b.astuple()))
    assert union_box([a]).astuple() == pytest.approx(a.astuple())
    with pytest.raises(ValueError):
        union_box([])


@settings(max_examples=100, deadline=None)
@given(boxes, boxes)
def test_union_contains_both(a, b):
    u = union_box([a, b])
    ax1, ay1, ax2, ay2 = a.corners()
    ux1, uy1, ux2, uy2 = u.corners()
    assert ux1 <= ax1 + 1e-12 and uy1 <= ay1 + 1e-12
    assert ux2 >= ax2 - 1e-12 and uy2 >= ay2 - 1e-12
