"""Geographic verifiable map: geo-certificates in a sparse Merkle tree over the WGS84 shell."""

from .geo import WGS84, BitStringPair, EarthModel, GeoPoint

__all__ = ["WGS84", "BitStringPair", "EarthModel", "GeoPoint"]
__version__ = "0.1.0"
