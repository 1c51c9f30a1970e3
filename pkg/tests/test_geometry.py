import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gridspot.errors import ValidationError
from gridspot.geometry import (CenterBox, CornerBox, center_to_corner, corner_to_center, iou,
                               iou_matrix, shape_iou)

coord = st.floats(-1e3, 1e3, allow_nan=False)
size = st.floats(1e-2, 1e3, allow_nan=False)


@st.composite
def corner_boxes(draw):
    x, y, w, h = draw(coord), draw(coord), draw(size), draw(size)
    return CornerBox(x, y, x + w, y + h)


def test_corner_to_center_example():
    c = corner_to_center(CornerBox(100, 50, 200, 150), 500, 500)
    assert (c.x, c.y, c.w, c.h) == pytest.approx((0.30, 0.20, 0.20, 0.20), abs=1e-12)


def test_full_image_box():
    c = corner_to_center(CornerBox(0, 0, 640, 480), 640, 480)
    assert (c.x, c.y, c.w, c.h) == (0.5, 0.5, 1.0, 1.0)
    assert center_to_corner(CenterBox(0.5, 0.5, 1.0, 1.0), 100, 100) == CornerBox(0, 0, 100, 100)


def test_center_to_corner_example():
    b = center_to_corner(CenterBox(0.30, 0.20, 0.20, 0.20), 500, 500)
    assert b.as_array() == pytest.approx([100, 50, 200, 150], abs=1e-9)


@pytest.mark.parametrize("bad", [
    lambda: CenterBox(0.5, 0.5, 0.0, 0.1),
    lambda: CenterBox(1.2, 0.5, 0.1, 0.1),
    lambda: CornerBox(10, 0, 5, 10),
    lambda: CornerBox(0, 0, math.nan, 1),
    lambda: corner_to_center(CornerBox(5, 5, 5, 10), 100, 100),
    lambda: corner_to_center(CornerBox(0, 0, 10, 10), 0, 100),
])
def test_invalid_boxes_rejected(bad):
    with pytest.raises(ValidationError):
        bad()


def test_iou_examples():
    a = CornerBox(0, 0, 10, 10)
    assert iou(a, a) == 1.0
    assert iou(a, CornerBox(20, 20, 30, 30)) == 0.0
    assert iou(a, CornerBox(5, 0, 15, 10)) == pytest.approx(1 / 3, abs=1e-15)
    assert iou(a, CornerBox(10, 0, 20, 10)) == 0.0      # touching edges


@given(corner_boxes(), corner_boxes())
def test_iou_symmetric_and_bounded(a, b):
    v = iou(a, b)
    assert v == iou(b, a)
    assert 0.0 <= v <= 1.0


@given(corner_boxes())
def test_iou_identity(a):
    assert iou(a, a) == pytest.approx(1.0, abs=1e-12)


@given(corner_boxes(), corner_boxes(), st.floats(-100, 100), st.floats(-100, 100), st.floats(0.1, 10))
def test_iou_translation_and_scale_invariant(a, b, dx, dy, k):
    base = iou(a, b)
    assert iou(a.translate(dx, dy), b.translate(dx, dy)) == pytest.approx(base, abs=1e-6)
    sa = CornerBox(*(a.as_array() * k))
    sb = CornerBox(*(b.as_array() * k))
    assert iou(sa, sb) == pytest.approx(base, abs=1e-9)


@given(st.floats(0.001, 0.999), st.floats(0.001, 0.999), st.floats(0.001, 1.0), st.floats(0.001, 1.0),
       st.integers(1, 5000), st.integers(1, 5000))
def test_center_corner_roundtrip(x, y, w, h, W, H):
    c = CenterBox(x, y, w, h)
    back = corner_to_center(center_to_corner(c, W, H), W, H)
    assert np.abs(back.as_array() - c.as_array()).max() < 1e-9


def test_iou_matrix_matches_scalar():
    rng = np.random.default_rng(3)
    xy = rng.uniform(0, 50, (20, 2))
    wh = rng.uniform(1, 20, (20, 2))
    boxes = np.hstack([xy, xy + wh])
    m = iou_matrix(boxes, boxes[:7])
    for i in range(20):
        for j in range(7):
            assert m[i, j] == pytest.approx(iou(CornerBox(*boxes[i]), CornerBox(*boxes[j])), abs=1e-12)


def test_shape_iou_is_centered_iou():
    a, b = np.array([[2.0, 4.0]]), np.array([[4.0, 2.0]])
    # centred 2x4 vs 4x2 overlap in a 2x2 square: 4 / (8 + 8 - 4)
    assert shape_iou(a, b)[0, 0] == pytest.approx(4 / 12)
    assert shape_iou(a, a)[0, 0] == 1.0
