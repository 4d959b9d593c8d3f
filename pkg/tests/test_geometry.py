import math

import numpy as np
import pytest

from terasim.geometry import (
    offset_point,
    point_along,
    polyline_cumlen,
    rect_corners,
    rects_overlap,
    separating_axis_check,
)

from oracles import point_sampling_overlap


def test_cumlen_straight():
    cum = polyline_cumlen([(0, 0), (100, 0)])
    assert cum == [0.0, 100.0]


def test_point_along_midpoint_and_offset():
    pts = [(0.0, 0.0), (100.0, 0.0)]
    cum = polyline_cumlen(pts)
    x, y, h = point_along(pts, cum, 50.0)
    assert (x, y, h) == (50.0, 0.0, 0.0)
    ox, oy = offset_point(x, y, h, 1.5)
    assert ox == pytest.approx(50.0)
    assert oy == pytest.approx(1.5)  # positive lateral goes left of travel


def test_point_along_out_of_range():
    pts = [(0.0, 0.0), (10.0, 0.0)]
    cum = polyline_cumlen(pts)
    with pytest.raises(ValueError):
        point_along(pts, cum, 10.5)


def test_rect_corners_axis_aligned():
    corners = rect_corners(0.0, 0.0, 0.0, 4.0, 2.0)
    assert sorted(corners) == sorted([(2, 1), (-2, 1), (-2, -1), (2, -1)])


def test_unit_squares_separated_and_overlapping():
    a = rect_corners(0, 0, 0, 1, 1)
    b = rect_corners(2.0, 0, 0, 1, 1)
    assert not rects_overlap(a, b)
    c = rect_corners(0.9, 0, 0, 1, 1)
    assert rects_overlap(a, c)


def test_certificate_extents():
    a = rect_corners(0, 0, 0, 2, 2)
    b = rect_corners(1.5, 0, 0, 2, 2)
    hit, axis, depth = separating_axis_check(a, b)
    assert hit
    assert depth == pytest.approx(0.5)
    assert abs(axis[0]) == pytest.approx(1.0)

    b = rect_corners(3.0, 0, 0, 2, 2)
    hit, axis, gap = separating_axis_check(a, b)
    assert not hit
    assert gap == pytest.approx(1.0)


def test_rotated_cross_overlap():
    # two long thin bars crossing at 90 degrees overlap despite distant corners
    a = rect_corners(0, 0, 0.0, 10.0, 0.4)
    b = rect_corners(0, 0, math.pi / 2, 10.0, 0.4)
    assert rects_overlap(a, b)


def test_diagonal_near_miss():
    # rotated square whose corner approaches but does not touch its neighbour
    a = rect_corners(0, 0, 0, 2, 2)
    b = rect_corners(2.42, 0, math.pi / 4, 2, 2)  # corner at x ~ 1.006
    assert not rects_overlap(a, b)
    c = rect_corners(2.40, 0, math.pi / 4, 2, 2)
    assert rects_overlap(a, c)


def test_against_point_sampling_oracle_quick():
    rng = np.random.default_rng(42)
    checked = 0
    for _ in range(200):
        ra = (rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(0, 2 * math.pi),
              rng.uniform(0.5, 6.0), rng.uniform(0.3, 2.5))
        rb = (rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(0, 2 * math.pi),
              rng.uniform(0.5, 6.0), rng.uniform(0.3, 2.5))
        ca = rect_corners(*ra)
        cb = rect_corners(*rb)
        hit, _, extent = separating_axis_check(ca, cb)
        tol = max(
            math.hypot(ra[3] / 99, ra[4] / 99),
            math.hypot(rb[3] / 99, rb[4] / 99),
        )
        if extent <= tol:
            continue  # inside the sampling oracle's blind band
        assert point_sampling_overlap(ra, rb) == hit
        checked += 1
    assert checked > 150
