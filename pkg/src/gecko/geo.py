"""Earth model, coordinate discretization and bit-string-pair node addressing.

A node of the geographic tree is addressed by a pair of bit strings: the
*surface* string interleaves longitude and latitude bits (longitude first),
the *altitude* string holds the leading bits of the discretized altitude.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from typing import NamedTuple


class GeoRangeError(ValueError):
    """A coordinate lies outside the modelled range."""


class StructureError(ValueError):
    """A bit-string pair does not name a node of the tree."""


@dataclass(frozen=True)
class EarthModel:
    r_a: float = 6378137.0
    r_b: float = 6356752.3142
    bits_x: int = 26
    bits_y: int = 25
    bits_z: int = 15
    min_alt: int = -11000

    def __post_init__(self) -> None:
        if self.bits_x != self.bits_y + 1:
            raise ValueError("longitude must carry exactly one more bit than latitude")
        if not (1 <= self.bits_y and self.bits_x + self.bits_y <= 56 and 1 <= self.bits_z <= 16):
            raise ValueError("bit widths do not fit the canonical pair encoding")

    @classmethod
    def derived(cls, r_a: float = 6378137.0, r_b: float = 6356752.3142,
                min_alt: int = -11000, top_alt: int = 9000) -> EarthModel:
        """Derive the bit widths giving one-meter precision for the given axes."""
        bx = math.floor(math.log2(2 * r_a * math.pi)) + 1
        by = math.floor(math.log2(r_b * math.pi)) + 1
        bz = math.floor(math.log2(top_alt - min_alt)) + 1
        return cls(r_a, r_b, bx, by, bz, min_alt)

    @property
    def max_x(self) -> int:
        return (1 << self.bits_x) - 1

    @property
    def max_y(self) -> int:
        return (1 << self.bits_y) - 1

    @property
    def max_z(self) -> int:
        return (1 << self.bits_z) - 1

    @property
    def max_alt(self) -> int:
        """Highest altitude of the shell (H); the closed upper bound is H + 1."""
        return self.min_alt + self.max_z

    @property
    def surface_bits(self) -> int:
        return self.bits_x + self.bits_y

    @property
    def authalic_radius(self) -> float:
        a, b = self.r_a, self.r_b
        e = math.sqrt(1.0 - (b * b) / (a * a))
        return math.sqrt((a * a + (b * b / e) * math.log((1.0 + e) / (b / a))) / 2.0)


WGS84 = EarthModel()


class GeoPoint(NamedTuple):
    lon: float
    lat: float
    alt: float = 0.0


class DiscretePoint(NamedTuple):
    x: int
    y: int
    z: int


class BitStringPair(NamedTuple):
    """Surface and altitude bit strings stored as integers plus bit lengths."""

    surface: int = 0
    surface_len: int = 0
    altitude: int = 0
    altitude_len: int = 0

    @classmethod
    def from_strings(cls, surface: str = "", altitude: str = "") -> BitStringPair:
        for s in (surface, altitude):
            if s.strip("01"):
                raise StructureError(f"not a bit string: {s!r}")
        return cls(int(surface or "0", 2), len(surface), int(altitude or "0", 2), len(altitude))

    @property
    def surface_str(self) -> str:
        return format(self.surface, f"0{self.surface_len}b") if self.surface_len else ""

    @property
    def altitude_str(self) -> str:
        return format(self.altitude, f"0{self.altitude_len}b") if self.altitude_len else ""

    @property
    def depth(self) -> int:
        return self.surface_len + self.altitude_len

    def __str__(self) -> str:
        return f"({self.surface_str or 'ε'}, {self.altitude_str or 'ε'})"

    def to_bytes(self) -> bytes:
        """Canonical 11-byte encoding: len | 7 bytes surface | len | 2 bytes altitude."""
        return _encode_pair(self.surface, self.surface_len, self.altitude, self.altitude_len)

    @classmethod
    def from_bytes(cls, data: bytes) -> BitStringPair:
        if len(data) != 11:
            raise StructureError(f"pair encoding must be 11 bytes, got {len(data)}")
        sl, al = data[0], data[8]
        if sl > 56 or al > 16:
            raise StructureError("bit lengths out of range")
        s_all = int.from_bytes(data[1:8], "big")
        a_all = int.from_bytes(data[9:11], "big")
        s, a = s_all >> (56 - sl), a_all >> (16 - al)
        # padding bits must be zero so that the encoding stays canonical
        if s << (56 - sl) != s_all or a << (16 - al) != a_all:
            raise StructureError("non-zero padding in pair encoding")
        return cls(s, sl, a, al)

    def hex(self) -> str:
        return self.to_bytes().hex()

    @classmethod
    def fromhex(cls, text: str) -> BitStringPair:
        try:
            raw = bytes.fromhex(text)
        except ValueError as exc:
            raise StructureError(f"bad pair hex {text!r}") from exc
        return cls.from_bytes(raw)


@functools.lru_cache(maxsize=1 << 18)
def _encode_pair(s: int, sl: int, a: int, al: int) -> bytes:
    if not (0 <= sl <= 56 and 0 <= al <= 16):
        raise StructureError(f"bit lengths out of range: {sl}, {al}")
    v = (((sl << 56) | (s << (56 - sl))) << 24) | (al << 16) | (a << (16 - al))
    return v.to_bytes(11, "big")


ROOT = BitStringPair()


class NodeFrustum(NamedTuple):
    lon_lo: float
    lon_hi: float
    lat_lo: float
    lat_hi: float
    alt_lo: float
    alt_hi: float

    def contains(self, lon: float, lat: float, alt: float, model: EarthModel = WGS84) -> bool:
        """Half-open membership, closed only at the global maxima."""
        return (
            _in(lon, self.lon_lo, self.lon_hi, 180.0)
            and _in(lat, self.lat_lo, self.lat_hi, 90.0)
            and _in(alt, self.alt_lo, self.alt_hi, float(model.max_alt + 1))
        )


def _in(v: float, lo: float, hi: float, top: float) -> bool:
    return lo <= v < hi or v == hi == top


def validate_pair(n: BitStringPair, model: EarthModel = WGS84) -> None:
    if not (0 <= n.surface_len <= model.surface_bits and 0 <= n.altitude_len <= model.bits_z):
        raise StructureError(f"pair {n} has lengths outside the tree")
    if n.surface >> n.surface_len or n.altitude >> n.altitude_len or n.surface < 0 or n.altitude < 0:
        raise StructureError(f"pair {n} has bits beyond its length")


# -- discretization ----------------------------------------------------------


def discretize(p: GeoPoint, model: EarthModel = WGS84) -> DiscretePoint:
    lon, lat, alt = p
    if not -180.0 <= lon <= 180.0:
        raise GeoRangeError(f"longitude {lon} outside [-180, 180]")
    if not -90.0 <= lat <= 90.0:
        raise GeoRangeError(f"latitude {lat} outside [-90, 90]")
    if not model.min_alt <= alt <= model.max_alt + 1:
        raise GeoRangeError(f"altitude {alt} outside [{model.min_alt}, {model.max_alt + 1}]")
    return DiscretePoint(
        _grid_index(lon, -180.0, 360.0, model.bits_x),
        _grid_index(lat, -90.0, 180.0, model.bits_y),
        _alt_index(alt, model),
    )


def _alt_index(alt: float, model: EarthModel) -> int:
    if alt == model.max_alt + 1:
        return model.max_z
    z = min(math.floor(alt - model.min_alt), model.max_z)
    # the subtraction can round up across a cell edge for tiny negative offsets
    if model.min_alt + z > alt:
        z -= 1
    return z


def _grid_index(v: float, origin: float, span: float, bits: int) -> int:
    n = 1 << bits
    if v == origin + span:
        return n - 1
    i = min(math.floor((v - origin) / span * n), n - 1)
    # keep the index consistent with the cell bounds used by node_volume
    step = span / n
    if v < i * step + origin:
        i -= 1
    elif i + 1 < n and v >= (i + 1) * step + origin:
        i += 1
    return i


def _spread(v: int) -> int:
    v &= 0xFFFFFFFF
    v = (v | (v << 16)) & 0x0000FFFF0000FFFF
    v = (v | (v << 8)) & 0x00FF00FF00FF00FF
    v = (v | (v << 4)) & 0x0F0F0F0F0F0F0F0F
    v = (v | (v << 2)) & 0x3333333333333333
    v = (v | (v << 1)) & 0x5555555555555555
    return v


def _compact(v: int) -> int:
    v &= 0x5555555555555555
    v = (v | (v >> 1)) & 0x3333333333333333
    v = (v | (v >> 2)) & 0x0F0F0F0F0F0F0F0F
    v = (v | (v >> 4)) & 0x00FF00FF00FF00FF
    v = (v | (v >> 8)) & 0x0000FFFF0000FFFF
    v = (v | (v >> 16)) & 0x00000000FFFFFFFF
    return v


def interleave(x: int, y: int, x_len: int, y_len: int) -> int:
    """Interleave x and y prefixes starting with x; requires x_len in {y_len, y_len + 1}."""
    if x_len == y_len:
        return (_spread(x) << 1) | _spread(y)
    # append a zero to y so both have x_len bits, then drop the trailing slot
    return ((_spread(x) << 1) | _spread(y << 1)) >> 1


def deinterleave(s: int, length: int) -> tuple[int, int, int, int]:
    """Split a surface prefix into (x, x_len, y, y_len)."""
    x_len, y_len = (length + 1) // 2, length // 2
    if length % 2:
        s <<= 1
        return _compact(s >> 1), x_len, _compact(s) >> 1, y_len
    return _compact(s >> 1), x_len, _compact(s), y_len


def encode_point(d: DiscretePoint, model: EarthModel = WGS84) -> BitStringPair:
    return BitStringPair(interleave(d.x, d.y, model.bits_x, model.bits_y), model.surface_bits, d.z, model.bits_z)


def point_pair(p: GeoPoint, model: EarthModel = WGS84) -> BitStringPair:
    return encode_point(discretize(p, model), model)


# -- tree structure ----------------------------------------------------------


def node_children(n: BitStringPair, model: EarthModel = WGS84) -> frozenset[BitStringPair]:
    validate_pair(n, model)
    s, sl, a, al = n
    if al == model.bits_z:
        return frozenset()
    alt_kids = {BitStringPair(s, sl, a << 1, al + 1), BitStringPair(s, sl, (a << 1) | 1, al + 1)}
    if al == 0 and sl < model.surface_bits:
        alt_kids |= {BitStringPair(s << 1, sl + 1, 0, 0), BitStringPair((s << 1) | 1, sl + 1, 0, 0)}
    return frozenset(alt_kids)


def child_slots(n: BitStringPair, model: EarthModel = WGS84) -> tuple[BitStringPair | None, ...]:
    """Children in hashing order (surface.0, surface.1, altitude.0, altitude.1); None where absent."""
    s, sl, a, al = n
    if al == model.bits_z:
        return (None, None, None, None)
    surf: tuple[BitStringPair | None, ...] = (None, None)
    if al == 0 and sl < model.surface_bits:
        surf = (BitStringPair(s << 1, sl + 1, 0, 0), BitStringPair((s << 1) | 1, sl + 1, 0, 0))
    return surf + (BitStringPair(s, sl, a << 1, al + 1), BitStringPair(s, sl, (a << 1) | 1, al + 1))


def node_parent(n: BitStringPair) -> BitStringPair:
    s, sl, a, al = n
    if al:
        return BitStringPair(s, sl, a >> 1, al - 1)
    if sl:
        return BitStringPair(s >> 1, sl - 1, 0, 0)
    raise StructureError("the root has no parent")


def is_ancestor_or_self(a: BitStringPair, b: BitStringPair) -> bool:
    """True if ``a`` lies on the tree path from the root to ``b``."""
    if a.altitude_len == 0:
        return a.surface_len <= b.surface_len and (b.surface >> (b.surface_len - a.surface_len)) == a.surface
    return (
        a.surface_len == b.surface_len
        and a.surface == b.surface
        and a.altitude_len <= b.altitude_len
        and (b.altitude >> (b.altitude_len - a.altitude_len)) == a.altitude
    )


def volumes_nested(a: BitStringPair, b: BitStringPair) -> bool:
    """True if the volume of ``a`` contains the volume of ``b``."""
    return (
        a.surface_len <= b.surface_len
        and (b.surface >> (b.surface_len - a.surface_len)) == a.surface
        and a.altitude_len <= b.altitude_len
        and (b.altitude >> (b.altitude_len - a.altitude_len)) == a.altitude
    )


def volumes_overlap(a: BitStringPair, b: BitStringPair) -> bool:
    """Dyadic cells either nest or are disjoint, so overlap is prefix-comparability per dimension."""
    if a.surface_len <= b.surface_len:
        if (b.surface >> (b.surface_len - a.surface_len)) != a.surface:
            return False
    elif (a.surface >> (a.surface_len - b.surface_len)) != b.surface:
        return False
    if a.altitude_len <= b.altitude_len:
        return (b.altitude >> (b.altitude_len - a.altitude_len)) == a.altitude
    return (a.altitude >> (a.altitude_len - b.altitude_len)) == b.altitude


# -- geometry of nodes -------------------------------------------------------


def node_volume(n: BitStringPair, model: EarthModel = WGS84) -> NodeFrustum:
    validate_pair(n, model)
    x, xl, y, yl = deinterleave(n.surface, n.surface_len)
    lon_step = 360.0 / (1 << model.bits_x)
    lat_step = 180.0 / (1 << model.bits_y)
    x_lo = x << (model.bits_x - xl)
    y_lo = y << (model.bits_y - yl)
    z_lo = n.altitude << (model.bits_z - n.altitude_len)
    return NodeFrustum(
        x_lo * lon_step - 180.0,
        (x_lo + (1 << (model.bits_x - xl))) * lon_step - 180.0,
        y_lo * lat_step - 90.0,
        (y_lo + (1 << (model.bits_y - yl))) * lat_step - 90.0,
        float(model.min_alt + z_lo),
        float(model.min_alt + z_lo + (1 << (model.bits_z - n.altitude_len))),
    )


def rect_area(lon_lo: float, lon_hi: float, lat_lo: float, lat_hi: float,
              model: EarthModel = WGS84) -> float:
    r = model.authalic_radius
    return r * r * math.radians(lon_hi - lon_lo) * (math.sin(math.radians(lat_hi)) - math.sin(math.radians(lat_lo)))


def cell_area(n: BitStringPair, model: EarthModel = WGS84) -> float:
    """Area of the node's lon/lat cell on the authalic sphere, in square meters."""
    v = node_volume(n, model)
    return rect_area(v.lon_lo, v.lon_hi, v.lat_lo, v.lat_hi, model)


def surface_prefix(n: BitStringPair, depth: int) -> BitStringPair:
    return BitStringPair(n.surface >> (n.surface_len - depth), depth, 0, 0)
