"""Planar geometry: piecewise-linear polylines and oriented-rectangle overlap.

All coordinates are meters in a flat local Cartesian frame, angles radians
CCW from +x.
"""

from __future__ import annotations

import math
from bisect import bisect_right


def polyline_cumlen(points: list[tuple[float, float]]) -> list[float]:
    """Cumulative arc length at each vertex; cum[0] == 0."""
    cum = [0.0]
    total = 0.0
    for i in range(1, len(points)):
        dx = points[i][0] - points[i - 1][0]
        dy = points[i][1] - points[i - 1][1]
        total += math.hypot(dx, dy)
        cum.append(total)
    return cum


def polyline_length(points: list[tuple[float, float]]) -> float:
    return polyline_cumlen(points)[-1]


def point_along(
    points: list[tuple[float, float]],
    cum: list[float],
    s: float,
) -> tuple[float, float, float]:
    """Interpolate (x, y, heading) at arc length s.

    At a vertex the heading of the following segment applies; at the final
    vertex the last segment's heading applies. s must lie in [0, length].
    """
    if s < 0.0 or s > cum[-1]:
        raise ValueError(f"s={s} outside [0, {cum[-1]}]")
    # index of the segment containing s; last point belongs to last segment
    i = bisect_right(cum, s) - 1
    if i >= len(points) - 1:
        i = len(points) - 2
    x0, y0 = points[i]
    x1, y1 = points[i + 1]
    seg = cum[i + 1] - cum[i]
    t = (s - cum[i]) / seg
    return x0 + t * (x1 - x0), y0 + t * (y1 - y0), math.atan2(y1 - y0, x1 - x0)


def offset_point(x: float, y: float, heading: float, lateral: float) -> tuple[float, float]:
    """Shift a point laterally; positive lateral is left of the heading."""
    return x - lateral * math.sin(heading), y + lateral * math.cos(heading)


def rect_corners(
    cx: float, cy: float, heading: float, length: float, width: float
) -> tuple[tuple[float, float], ...]:
    """Corners of an oriented rectangle centered at (cx, cy), CCW order."""
    c = math.cos(heading)
    s = math.sin(heading)
    hl = 0.5 * length
    hw = 0.5 * width
    # local corners (±hl, ±hw) rotated into world frame
    return (
        (cx + hl * c - hw * s, cy + hl * s + hw * c),
        (cx - hl * c - hw * s, cy - hl * s + hw * c),
        (cx - hl * c + hw * s, cy - hl * s - hw * c),
        (cx + hl * c + hw * s, cy + hl * s - hw * c),
    )


def separating_axis_check(
    corners_a: tuple[tuple[float, float], ...],
    corners_b: tuple[tuple[float, float], ...],
) -> tuple[bool, tuple[float, float], float]:
    """Overlap test for two convex quads via the separating-axis theorem.

    Returns (overlap, axis, extent). When the quads are disjoint, axis is a
    separating axis and extent the (positive) gap along it. When they
    overlap, axis is the minimum-penetration axis and extent the penetration
    depth, which together form a certificate reproducible from the corner
    coordinates.
    """
    best_gap = -math.inf
    gap_axis = (1.0, 0.0)
    min_pen = math.inf
    pen_axis = (1.0, 0.0)
    for corners in (corners_a, corners_b):
        for i in (0, 1):  # two unique edge normals per rectangle
            x0, y0 = corners[i]
            x1, y1 = corners[i + 1]
            ax = y1 - y0
            ay = x0 - x1
            norm = math.hypot(ax, ay)
            if norm == 0.0:
                continue
            ax /= norm
            ay /= norm
            amin = amax = corners_a[0][0] * ax + corners_a[0][1] * ay
            for px, py in corners_a[1:]:
                p = px * ax + py * ay
                if p < amin:
                    amin = p
                elif p > amax:
                    amax = p
            bmin = bmax = corners_b[0][0] * ax + corners_b[0][1] * ay
            for px, py in corners_b[1:]:
                p = px * ax + py * ay
                if p < bmin:
                    bmin = p
                elif p > bmax:
                    bmax = p
            overlap = min(amax, bmax) - max(amin, bmin)
            if overlap < 0.0:
                if -overlap > best_gap:
                    best_gap = -overlap
                    gap_axis = (ax, ay)
            elif overlap < min_pen:
                min_pen = overlap
                pen_axis = (ax, ay)
    if best_gap > -math.inf:
        return False, gap_axis, best_gap
    return True, pen_axis, min_pen


def rects_overlap(
    corners_a: tuple[tuple[float, float], ...],
    corners_b: tuple[tuple[float, float], ...],
) -> bool:
    return separating_axis_check(corners_a, corners_b)[0]
