import numpy as np
import pytest
from hypothesis import given, strategies as st

from stochdet.boxgeom import (
    Box,
    SizeBucket,
    area,
    bucket,
    buckets_of,
    cxcywh_to_xyxy,
    iou,
    iou_matrix,
    xywh_to_xyxy,
    xyxy_to_cxcywh,
    xyxy_to_xywh,
)

coord = st.floats(min_value=-500, max_value=500, allow_nan=False, allow_infinity=False)
extent = st.floats(min_value=0, max_value=300, allow_nan=False, allow_infinity=False)


@st.composite
def boxes(draw, min_extent=0.0):
    x = draw(coord)
    y = draw(coord)
    w = draw(st.floats(min_value=min_extent, max_value=300))
    h = draw(st.floats(min_value=min_extent, max_value=300))
    return Box(x, y, x + w, y + h)


def test_area_examples():
    assert area(Box(0, 0, 10, 10)) == 100
    assert area(Box(5, 5, 5, 9)) == 0
    assert area(Box(0, 0, 32, 32)) == 1024


def test_iou_examples():
    b = Box(3, 4, 20, 11)
    assert iou(b, b) == 1.0
    assert iou(Box(0, 0, 1, 1), Box(5, 5, 6, 6)) == 0.0
    assert iou(Box(0, 0, 2, 2), Box(1, 1, 3, 3)) == pytest.approx(1 / 7, abs=1e-15)
    assert iou(Box(5, 5, 5, 9), Box(5, 5, 5, 9)) == 0.0


def test_bucket_examples():
    assert bucket(Box(0, 0, 10, 10)) is SizeBucket.SMALL
    assert bucket(Box(0, 0, 32, 32)) is SizeBucket.MEDIUM
    assert bucket(Box(0, 0, 100, 100)) is SizeBucket.LARGE
    assert bucket(Box(0, 0, 96, 96)) is SizeBucket.LARGE
    assert bucket(Box(0, 0, 10, 10), thresholds=(50, 200)) is SizeBucket.MEDIUM


def test_invalid_box_rejected():
    with pytest.raises(ValueError):
        Box(1, 0, 0, 1)
    with pytest.raises(ValueError):
        Box(0, 0, float("nan"), 1)


@given(boxes(), boxes())
def test_iou_symmetric_and_bounded(a, b):
    v = iou(a, b)
    assert v == iou(b, a)
    assert 0.0 <= v <= 1.0


grid = st.integers(-50, 50)


@st.composite
def grid_boxes(draw):
    x, y = draw(grid), draw(grid)
    return Box(x, y, x + draw(st.integers(1, 30)), y + draw(st.integers(1, 30)))


@given(grid_boxes(), grid_boxes())
def test_iou_one_iff_equal(a, b):
    assert iou(a, a) == pytest.approx(1.0)
    if iou(a, b) == 1.0:
        assert a == b


@given(boxes(), boxes())
def test_bucket_monotone_in_area(a, b):
    if area(a) <= area(b):
        assert bucket(a) <= bucket(b)


@given(st.lists(boxes(), min_size=1, max_size=8), st.lists(boxes(), min_size=1, max_size=8))
def test_iou_matrix_matches_scalar(xs, ys):
    m = iou_matrix(xs, ys)
    for i, a in enumerate(xs):
        for j, b in enumerate(ys):
            assert m[i, j] == pytest.approx(iou(a, b), abs=1e-12)


def test_array_buckets_match_scalar():
    rng = np.random.default_rng(0)
    arr = np.concatenate([rng.uniform(0, 100, (200, 2)), rng.uniform(0, 150, (200, 2))], axis=1)
    arr[:, 2:] += arr[:, :2]
    got = buckets_of(arr)
    want = [bucket(Box(*row)) for row in arr]
    assert list(got) == [int(w) for w in want]


@given(st.lists(boxes(), min_size=1, max_size=10))
def test_format_conversions_round_trip(bs):
    arr = np.array([b.as_tuple() for b in bs])
    np.testing.assert_allclose(xywh_to_xyxy(xyxy_to_xywh(arr)), arr, atol=1e-9)
    np.testing.assert_allclose(cxcywh_to_xyxy(xyxy_to_cxcywh(arr)), arr, atol=1e-9)
