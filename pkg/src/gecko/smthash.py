"""Node hashing rules for the geographic sparse Merkle tree."""

from __future__ import annotations

from typing import Sequence

from .crypto import sha256
from .geo import WGS84, BitStringPair, EarthModel

DEFAULT_HASH = sha256(b"\x00")
LEAF_TAG = b"\x00"
NODE_TAG = b"\x01"


class SortOrderError(ValueError):
    pass


def default_hash() -> bytes:
    return DEFAULT_HASH


def check_sorted(certs: Sequence[bytes]) -> None:
    for i, h in enumerate(certs):
        if len(h) != 32:
            raise SortOrderError("certificate hashes must be 32 bytes")
        if i and certs[i - 1] >= h:
            raise SortOrderError("certificate hashes must be strictly ascending")


def hash_leaf(certs: Sequence[bytes]) -> bytes:
    check_sorted(certs)
    if not certs:
        return DEFAULT_HASH
    return sha256(LEAF_TAG + b"".join(certs))


def hash_intermediate(children: Sequence[bytes], certs: Sequence[bytes]) -> bytes:
    """Hash of a non-sparse intermediate node; callers handle the sparse case."""
    if len(children) != 4:
        raise ValueError("intermediate nodes hash exactly four child slots")
    body = NODE_TAG + b"".join(children)
    if certs:
        body += sha256(b"".join(certs))
    return sha256(body)


def node_hash(pair: BitStringPair, certs: Sequence[bytes], children: Sequence[bytes],
              model: EarthModel = WGS84) -> bytes:
    """Hash of any node given its sorted certificates and four child-slot hashes."""
    if pair.altitude_len == model.bits_z:
        return hash_leaf(certs)
    if not certs and all(h == DEFAULT_HASH for h in children):
        return DEFAULT_HASH
    return hash_intermediate(children, certs)


# Preimage pieces for a certificate-free node whose only non-default child sits in slot k.
CHAIN_PREFIX = tuple(NODE_TAG + DEFAULT_HASH * k for k in range(4))
CHAIN_SUFFIX = tuple(DEFAULT_HASH * (3 - k) for k in range(4))


def slot_in_parent(pair: BitStringPair) -> int:
    if pair.altitude_len:
        return 2 + (pair.altitude & 1)
    return pair.surface & 1


def chain_hash(h: bytes, pair: BitStringPair, stop_depth: int) -> bytes:
    """Hash of ``pair``'s ancestor at ``stop_depth`` when every node in between is a bare pass-through."""
    if h == DEFAULT_HASH:
        return h
    s, sl, a, al = pair
    depth = sl + al
    while depth > stop_depth:
        if al:
            k = 2 + (a & 1)
            a >>= 1
            al -= 1
        else:
            k = s & 1
            s >>= 1
            sl -= 1
        h = sha256(CHAIN_PREFIX[k] + h + CHAIN_SUFFIX[k])
        depth -= 1
    return h
