"""Planar polygon helpers in lon/lat degree space.

Overlap predicates follow a positive-area convention: two regions overlap
when their interiors intersect, so shapes that only touch along an edge or
at a corner do not overlap.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

Point = tuple[float, float]
Ring = Sequence[Point]


def signed_area(ring: Ring) -> float:
    """Shoelace area (positive for counter-clockwise rings)."""
    n = len(ring)
    if n < 3:
        return 0.0
    x0, y0 = ring[0]
    acc = 0.0
    px, py = 0.0, 0.0
    for i in range(1, n + 1):
        x, y = ring[i % n]
        x -= x0
        y -= y0
        # trapezoid form: exact zero for rings collapsed onto an axis-parallel line
        acc += (x - px) * (y + py)
        px, py = x, y
    return -acc / 2.0


def bbox(ring: Ring) -> tuple[float, float, float, float]:
    xs = [p[0] for p in ring]
    ys = [p[1] for p in ring]
    return min(xs), max(xs), min(ys), max(ys)


def ccw(ring: Ring) -> list[Point]:
    pts = list(ring)
    return pts if signed_area(pts) >= 0 else pts[::-1]


def _cross(o: Point, a: Point, b: Point) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def is_convex(ring: Ring) -> bool:
    n = len(ring)
    sign = 0
    for i in range(n):
        c = _cross(ring[i], ring[(i + 1) % n], ring[(i + 2) % n])
        if c:
            s = 1 if c > 0 else -1
            if sign and s != sign:
                return False
            sign = s
    return True


def _on_segment(p: Point, q: Point, r: Point) -> bool:
    return min(p[0], r[0]) <= q[0] <= max(p[0], r[0]) and min(p[1], r[1]) <= q[1] <= max(p[1], r[1])


def segments_intersect(p1: Point, p2: Point, q1: Point, q2: Point) -> bool:
    """Closed segment intersection (touching counts)."""
    d1 = _cross(q1, q2, p1)
    d2 = _cross(q1, q2, p2)
    d3 = _cross(p1, p2, q1)
    d4 = _cross(p1, p2, q2)
    if ((d1 > 0 > d2) or (d1 < 0 < d2)) and ((d3 > 0 > d4) or (d3 < 0 < d4)):
        return True
    return (
        (d1 == 0 and _on_segment(q1, p1, q2))
        or (d2 == 0 and _on_segment(q1, p2, q2))
        or (d3 == 0 and _on_segment(p1, q1, p2))
        or (d4 == 0 and _on_segment(p1, q2, p2))
    )


def is_simple(ring: Ring) -> bool:
    n = len(ring)
    for i in range(n):
        a1, a2 = ring[i], ring[(i + 1) % n]
        if a1 == a2:
            return False
        for j in range(i + 1, n):
            if j == i or (j + 1) % n == i or j == (i + 1) % n:
                continue
            if segments_intersect(a1, a2, ring[j], ring[(j + 1) % n]):
                return False
    return True


def _clip_halfplane(pts: list[Point], inside, intersect) -> list[Point]:
    out: list[Point] = []
    if not pts:
        return out
    prev = pts[-1]
    prev_in = inside(prev)
    for cur in pts:
        cur_in = inside(cur)
        if cur_in:
            if not prev_in:
                out.append(intersect(prev, cur))
            out.append(cur)
        elif prev_in:
            out.append(intersect(prev, cur))
        prev, prev_in = cur, cur_in
    return out


def clip_to_rect(ring: Ring, x_lo: float, x_hi: float, y_lo: float, y_hi: float) -> list[Point]:
    """Sutherland-Hodgman clip against an axis-aligned rectangle."""

    def at_x(x):
        def f(p, q):
            t = (x - p[0]) / (q[0] - p[0])
            return (x, p[1] + t * (q[1] - p[1]))
        return f

    def at_y(y):
        def f(p, q):
            t = (y - p[1]) / (q[1] - p[1])
            return (p[0] + t * (q[0] - p[0]), y)
        return f

    pts = list(ring)
    pts = _clip_halfplane(pts, lambda p: p[0] >= x_lo, at_x(x_lo))
    pts = _clip_halfplane(pts, lambda p: p[0] <= x_hi, at_x(x_hi))
    pts = _clip_halfplane(pts, lambda p: p[1] >= y_lo, at_y(y_lo))
    pts = _clip_halfplane(pts, lambda p: p[1] <= y_hi, at_y(y_hi))
    return pts


def clip_convex(subject: Ring, clipper: Ring) -> list[Point]:
    """Clip ``subject`` against a convex ``clipper`` of any orientation."""
    clip = ccw(clipper)
    pts = list(subject)
    n = len(clip)
    for i in range(n):
        a, b = clip[i], clip[(i + 1) % n]

        def inside(p, a=a, b=b):
            return _cross(a, b, p) >= 0

        def intersect(p, q, a=a, b=b):
            dp, dq = _cross(a, b, p), _cross(a, b, q)
            t = dp / (dp - dq)
            return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))

        pts = _clip_halfplane(pts, inside, intersect)
        if not pts:
            break
    return pts


def rect_overlaps(ring: Ring, x_lo: float, x_hi: float, y_lo: float, y_hi: float,
                  ring_bbox: tuple[float, float, float, float] | None = None) -> bool:
    """True iff the open rectangle and the polygon interior intersect."""
    bx0, bx1, by0, by1 = ring_bbox or bbox(ring)
    if bx1 <= x_lo or bx0 >= x_hi or by1 <= y_lo or by0 >= y_hi:
        return False
    for x, y in ring:
        if x_lo < x < x_hi and y_lo < y < y_hi:
            return True
    return abs(signed_area(clip_to_rect(ring, x_lo, x_hi, y_lo, y_hi))) > 0.0


def triangulate(ring: Ring) -> list[list[Point]]:
    """Ear clipping for a simple polygon."""
    pts = ccw(ring)
    tris: list[list[Point]] = []
    guard = 0
    while len(pts) > 3 and guard < 10000:
        guard += 1
        n = len(pts)
        for i in range(n):
            a, b, c = pts[i - 1], pts[i], pts[(i + 1) % n]
            if _cross(a, b, c) <= 0:
                continue
            if any(
                p not in (a, b, c) and _cross(a, b, p) >= 0 and _cross(b, c, p) >= 0 and _cross(c, a, p) >= 0
                for p in pts
            ):
                continue
            tris.append([a, b, c])
            del pts[i]
            break
        else:
            # only collinear remnants left
            break
    if len(pts) == 3 and _cross(*pts) > 0:
        tris.append(pts)
    return tris


def polygons_overlap(a: Ring, b: Ring) -> bool:
    """True iff the interiors of two simple polygons intersect."""
    ax0, ax1, ay0, ay1 = bbox(a)
    bx0, bx1, by0, by1 = bbox(b)
    if ax1 <= bx0 or bx1 <= ax0 or ay1 <= by0 or by1 <= ay0:
        return False
    if is_convex(b):
        return abs(signed_area(clip_convex(a, b))) > 0.0
    if is_convex(a):
        return abs(signed_area(clip_convex(b, a))) > 0.0
    return any(abs(signed_area(clip_convex(a, tri))) > 0.0 for tri in triangulate(b))


def points_in_polygon(ring: Ring, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Closed point-in-polygon test (boundary points count as inside), vectorised."""
    pts = np.asarray(ring, dtype=float)
    inside = np.zeros(xs.shape, dtype=bool)
    on_edge = np.zeros(xs.shape, dtype=bool)
    n = len(pts)
    for i in range(n):
        x1, y1 = pts[i]
        x2, y2 = pts[(i + 1) % n]
        cross = (x2 - x1) * (ys - y1) - (y2 - y1) * (xs - x1)
        within = (
            (np.minimum(x1, x2) <= xs) & (xs <= np.maximum(x1, x2))
            & (np.minimum(y1, y2) <= ys) & (ys <= np.maximum(y1, y2))
        )
        on_edge |= (cross == 0) & within
        crosses = (y1 > ys) != (y2 > ys)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_at = x1 + (ys - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (xs < x_at)
    return inside | on_edge
