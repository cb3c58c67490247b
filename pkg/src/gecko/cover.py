"""Approximate volumes by sets of disjoint tree nodes.

Certificate claims and query circles are over-approximated: a grid depth is
picked from the relative grid size ``f`` (cell area at most ``f`` times the
polygon area), the intersecting cells at that depth are found by a
breadth-first walk over spatial neighbours, and complete sibling pairs are
merged into their parent.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from typing import Iterable, Sequence

from . import planar
from .geo import (
    WGS84,
    BitStringPair,
    EarthModel,
    GeoPoint,
    GeoRangeError,
    NodeFrustum,
    discretize,
    interleave,
    node_volume,
    rect_area,
)


class DegenerateGeometryError(ValueError):
    """The polygon has no area or is otherwise unusable."""


# cover sizes beyond this are almost certainly a misconfigured f
MAX_CELLS = 1 << 20
# relative slack when comparing a cell area against f * polygon area
_AREA_RTOL = 1e-9


@dataclass(frozen=True)
class PolygonFrustum:
    ring: tuple[tuple[float, float], ...]
    alt_min: float
    alt_max: float

    def __post_init__(self) -> None:
        ring = tuple((float(x), float(y)) for x, y in self.ring)
        if len(ring) > 1 and ring[0] == ring[-1]:
            ring = ring[:-1]
        object.__setattr__(self, "ring", ring)
        if len(ring) < 3:
            raise DegenerateGeometryError("a polygon needs at least three vertices")
        for lon, lat in ring:
            if not (-180.0 <= lon <= 180.0 and -90.0 <= lat <= 90.0):
                raise GeoRangeError(f"vertex ({lon}, {lat}) outside the lon/lat range")
        for (x1, y1), (x2, y2) in zip(ring, ring[1:] + ring[:1]):
            # long edges are only unambiguous along a pole, where they collapse to a point
            if abs(x2 - x1) > 180.0 and not (y1 == y2 and abs(y1) == 90.0):
                raise GeoRangeError("polygon crosses the antimeridian; split it first")
        if not self.alt_min < self.alt_max:
            raise ValueError(f"altitude range [{self.alt_min}, {self.alt_max}] is empty")
        if not planar.is_simple(ring):
            raise DegenerateGeometryError("polygon ring self-intersects")

    @classmethod
    def rectangle(cls, lon_lo: float, lon_hi: float, lat_lo: float, lat_hi: float,
                  alt_min: float, alt_max: float) -> PolygonFrustum:
        return cls(((lon_lo, lat_lo), (lon_hi, lat_lo), (lon_hi, lat_hi), (lon_lo, lat_hi)), alt_min, alt_max)

    @property
    def bbox(self) -> tuple[float, float, float, float]:
        return planar.bbox(self.ring)


@dataclass(frozen=True)
class VolumeSpec:
    frustums: tuple[PolygonFrustum, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "frustums", tuple(self.frustums))
        if not self.frustums:
            raise ValueError("a volume needs at least one frustum")

    @classmethod
    def of(cls, *frustums: PolygonFrustum) -> VolumeSpec:
        return cls(tuple(frustums))


# -- areas and depth ---------------------------------------------------------


def polygon_area(s: PolygonFrustum, model: EarthModel = WGS84) -> float:
    """Area of the surface projection on the authalic sphere (lon/sin(lat) shoelace)."""
    r = model.authalic_radius
    ring = [(math.radians(x), math.sin(math.radians(y))) for x, y in s.ring]
    area = abs(planar.signed_area(ring)) * r * r
    if area <= 1e-6:
        raise DegenerateGeometryError("polygon has zero area")
    return area


def _cell_bounds(ix: int, iy: int, lx: int, ly: int) -> tuple[float, float, float, float]:
    wx = 360.0 / (1 << lx)
    wy = 180.0 / (1 << ly)
    return ix * wx - 180.0, (ix + 1) * wx - 180.0, iy * wy - 90.0, (iy + 1) * wy - 90.0


def _ref_indices(s: PolygonFrustum, model: EarthModel) -> tuple[int, int]:
    lon, lat = s.ring[0]
    d = discretize(GeoPoint(lon, lat, model.min_alt), model)
    return d.x, d.y


def grid_depth(s: PolygonFrustum, f: float, model: EarthModel = WGS84) -> int:
    """Smallest surface depth whose cell at the reference vertex has area <= f * area(s)."""
    if f < 0:
        raise ValueError("relative grid size must be non-negative")
    area = polygon_area(s, model)
    if f == 0:
        return model.surface_bits
    target = f * area * (1.0 + _AREA_RTOL)
    x, y = _ref_indices(s, model)

    def cell(d: int) -> float:
        lx, ly = (d + 1) // 2, d // 2
        b = _cell_bounds(x >> (model.bits_x - lx), y >> (model.bits_y - ly), lx, ly)
        return rect_area(*b, model)

    lo, hi = 0, model.surface_bits
    if cell(hi) > target:
        return model.surface_bits
    while lo < hi:
        mid = (lo + hi) // 2
        if cell(mid) <= target:
            hi = mid
        else:
            lo = mid + 1
    return lo


# -- surface cover -----------------------------------------------------------


def merge_siblings(cells: Iterable[tuple[int, int]]) -> set[tuple[int, int]]:
    """Replace complete sibling pairs (bits, length) by their parent until fixpoint."""
    by_len: dict[int, set[int]] = {}
    for bits, length in cells:
        by_len.setdefault(length, set()).add(bits)
    for length in range(max(by_len, default=0), 0, -1):
        level = by_len.get(length)
        if not level:
            continue
        for bits in sorted(level):
            if bits & 1 == 0 and bits | 1 in level:
                level.discard(bits)
                level.discard(bits | 1)
                by_len.setdefault(length - 1, set()).add(bits >> 1)
    return {(bits, length) for length, level in by_len.items() for bits in level}


def grid_cells(s: PolygonFrustum, depth: int, model: EarthModel = WGS84) -> set[tuple[int, int]]:
    """Cells (ix, iy) at ``depth`` whose interiors meet the polygon, by BFS over neighbours."""
    lx, ly = (depth + 1) // 2, depth // 2
    nx, ny = 1 << lx, 1 << ly
    x, y = _ref_indices(s, model)
    ix0, iy0 = x >> (model.bits_x - lx), y >> (model.bits_y - ly)
    ring = s.ring
    rb = planar.bbox(ring)

    def hit(ix: int, iy: int) -> bool:
        return planar.rect_overlaps(ring, *_cell_bounds(ix, iy, lx, ly), ring_bbox=rb)

    found: set[tuple[int, int]] = set()
    seen: set[tuple[int, int]] = set()
    queue: deque[tuple[int, int]] = deque()
    # the reference vertex may sit on a cell corner, so seed with its 3x3 block
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            c = (ix0 + dx, iy0 + dy)
            if 0 <= c[0] < nx and 0 <= c[1] < ny:
                seen.add(c)
                if hit(*c):
                    found.add(c)
                    queue.append(c)
    while queue:
        cx, cy = queue.popleft()
        for c in ((cx + 1, cy), (cx - 1, cy), (cx, cy + 1), (cx, cy - 1)):
            if c in seen or not (0 <= c[0] < nx and 0 <= c[1] < ny):
                continue
            seen.add(c)
            if hit(*c):
                found.add(c)
                if len(found) > MAX_CELLS:
                    raise ValueError("cover exceeds the cell limit; increase f")
                queue.append(c)
    return found


def surface_cover(s: PolygonFrustum, f: float, model: EarthModel = WGS84) -> set[tuple[int, int]]:
    """Prefix-free surface strings (bits, length) whose cells cover the polygon."""
    depth = grid_depth(s, f, model)
    lx, ly = (depth + 1) // 2, depth // 2
    cells = grid_cells(s, depth, model)
    return merge_siblings((interleave(ix, iy, lx, ly), depth) for ix, iy in cells)


def altitude_range_string(alt_min: float, alt_max: float, model: EarthModel = WGS84) -> tuple[int, int]:
    """Longest altitude prefix whose slab contains [alt_min, alt_max)."""
    if not alt_min < alt_max:
        raise ValueError(f"inverted altitude range [{alt_min}, {alt_max}]")
    top = model.max_alt + 1
    if alt_min < model.min_alt or alt_max > top:
        raise GeoRangeError(f"altitude range [{alt_min}, {alt_max}] outside the shell")
    lo = min(math.floor(alt_min - model.min_alt), model.max_z)
    hi = max(lo, min(math.ceil(alt_max - model.min_alt) - 1, model.max_z))
    diff = lo ^ hi
    common = model.bits_z - diff.bit_length()
    return lo >> (model.bits_z - common), common


def reduce_nested(pairs: Iterable[BitStringPair]) -> set[BitStringPair]:
    """Drop every pair whose volume lies inside another pair of the set."""
    ps = set(pairs)
    alts = {(p.altitude, p.altitude_len) for p in ps}
    out = set()
    for p in ps:
        contained = False
        for a, al in alts:
            if al > p.altitude_len or (p.altitude >> (p.altitude_len - al)) != a:
                continue
            for sl in range(p.surface_len + 1):
                q = BitStringPair(p.surface >> (p.surface_len - sl), sl, a, al)
                if q != p and q in ps:
                    contained = True
                    break
            if contained:
                break
        if not contained:
            out.add(p)
    return out


def cover_frustum(s: PolygonFrustum, f: float, model: EarthModel = WGS84) -> set[BitStringPair]:
    a, al = altitude_range_string(s.alt_min, s.alt_max, model)
    return {BitStringPair(bits, length, a, al) for bits, length in surface_cover(s, f, model)}


def cover_volume(v: VolumeSpec, f: float, model: EarthModel = WGS84) -> set[BitStringPair]:
    pairs: set[BitStringPair] = set()
    for s in v.frustums:
        pairs |= cover_frustum(s, f, model)
    if len(v.frustums) == 1:
        return pairs
    return reduce_nested(pairs)


# -- circles -----------------------------------------------------------------

CIRCLE_SIDES = 16


def circle_polygon(center: GeoPoint, radius: float, sides: int = CIRCLE_SIDES,
                   model: EarthModel = WGS84) -> tuple[tuple[float, float], ...]:
    """Regular polygon circumscribing a surface circle (local tangent plane)."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    lon0, lat0 = center.lon, center.lat
    a, b = model.r_a, model.r_b
    e2 = 1.0 - (b * b) / (a * a)
    phi = math.radians(lat0)
    w = math.sqrt(1.0 - e2 * math.sin(phi) ** 2)
    m_radius = a * (1.0 - e2) / w ** 3
    n_radius = a / w
    r = radius / math.cos(math.pi / sides)
    dlat = math.degrees(r / m_radius)
    # scale longitude at the poleward edge so the polygon stays circumscribed
    edge = min(abs(lat0) + dlat, 89.999999)
    dlon = math.degrees(r / (n_radius * math.cos(math.radians(edge))))
    if lon0 - dlon < -180.0 or lon0 + dlon > 180.0:
        raise GeoRangeError("query circle crosses the antimeridian")
    pts = []
    for k in range(sides):
        t = 2.0 * math.pi * k / sides
        pts.append((lon0 + dlon * math.cos(t), max(-90.0, min(90.0, lat0 + dlat * math.sin(t)))))
    return tuple(pts)


def circle_volume(center: GeoPoint, radius: float, alt: tuple[float, float] | None = None,
                  model: EarthModel = WGS84) -> VolumeSpec:
    lo, hi = alt if alt is not None else (float(model.min_alt), float(model.max_alt + 1))
    return VolumeSpec.of(PolygonFrustum(circle_polygon(center, radius, model=model), lo, hi))


def cover_circle(center: GeoPoint, radius: float, alt: tuple[float, float] | None = None,
                 f: float = 1.0, model: EarthModel = WGS84) -> set[BitStringPair]:
    return cover_volume(circle_volume(center, radius, alt, model), f, model)


# -- predicates --------------------------------------------------------------


def intersects(n: NodeFrustum, s: PolygonFrustum) -> bool:
    """Positive-measure overlap of a node frustum and a polygon frustum."""
    if not (n.alt_lo < s.alt_max and s.alt_min < n.alt_hi):
        return False
    return planar.rect_overlaps(s.ring, n.lon_lo, n.lon_hi, n.lat_lo, n.lat_hi)


def node_intersects(pair: BitStringPair, s: PolygonFrustum, model: EarthModel = WGS84) -> bool:
    return intersects(node_volume(pair, model), s)


def frustums_overlap(a: PolygonFrustum, b: PolygonFrustum) -> bool:
    if not (a.alt_min < b.alt_max and b.alt_min < a.alt_max):
        return False
    return planar.polygons_overlap(a.ring, b.ring)


def volumes_overlap(a: VolumeSpec, b: VolumeSpec) -> bool:
    return any(frustums_overlap(x, y) for x in a.frustums for y in b.frustums)


def pairs_union_contains(pairs: Sequence[BitStringPair], lon: float, lat: float, alt: float,
                         model: EarthModel = WGS84) -> bool:
    return any(node_volume(p, model).contains(lon, lat, alt, model) for p in pairs)
