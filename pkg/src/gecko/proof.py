"""Completeness proofs: node openings plus frontier hashes that recompute the tree root.

Boundary entries that equal the default hash are left out on the wire and
in memory; the verifier fills missing child slots with the default hash.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

from .ctlog import SignedMapHead
from .geo import ROOT, WGS84, BitStringPair, EarthModel, StructureError, child_slots, node_parent, validate_pair, volumes_overlap
from .smthash import DEFAULT_HASH, SortOrderError, check_sorted, node_hash
from .wire import DecodeError, Reader, Writer

MAX_QUERY_PAIRS = 64


class ProofVerificationError(ValueError):
    pass


def _key(p: BitStringPair) -> bytes:
    return p.to_bytes()


def _hex32(text: str) -> bytes:
    if len(text) != 64 or text != text.lower():
        raise ProofVerificationError("hashes must be 64 lowercase hex digits")
    return bytes.fromhex(text)


def _pair_hex(text: str) -> BitStringPair:
    if text != text.lower():
        raise ProofVerificationError("pair encodings must be lowercase hex")
    return BitStringPair.fromhex(text)


@dataclass(frozen=True)
class CompletenessProof:
    query_pairs: tuple[BitStringPair, ...]
    openings: tuple[tuple[BitStringPair, tuple[bytes, ...]], ...]
    boundary: tuple[tuple[BitStringPair, bytes], ...]
    smh: SignedMapHead | None = None

    @classmethod
    def build(cls, queries, openings: Mapping[BitStringPair, tuple[bytes, ...]],
              boundary: Mapping[BitStringPair, bytes], smh: SignedMapHead | None = None) -> CompletenessProof:
        return cls(
            tuple(sorted(set(queries), key=_key)),
            tuple(sorted(openings.items(), key=lambda kv: _key(kv[0]))),
            tuple(sorted(((p, h) for p, h in boundary.items() if h != DEFAULT_HASH), key=lambda kv: _key(kv[0]))),
            smh,
        )

    def cert_hashes(self) -> set[bytes]:
        return {h for _, certs in self.openings for h in certs}

    # -- wire forms ------------------------------------------------------------

    def to_json(self) -> dict:
        return {
            "query_pairs": [p.hex() for p in self.query_pairs],
            "openings": [[p.hex(), [h.hex() for h in certs]] for p, certs in self.openings],
            "boundary": [[p.hex(), h.hex()] for p, h in self.boundary],
            "smh": self.smh.to_json() if self.smh is not None else None,
        }

    @classmethod
    def from_json(cls, d: Mapping) -> CompletenessProof:
        try:
            smh = d.get("smh")
            return cls(
                tuple(_pair_hex(p) for p in d["query_pairs"]),
                tuple((_pair_hex(p), tuple(_hex32(h) for h in certs)) for p, certs in d["openings"]),
                tuple((_pair_hex(p), _hex32(h)) for p, h in d["boundary"]),
                SignedMapHead.from_json(smh) if smh is not None else None,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ProofVerificationError(f"malformed proof: {exc}") from exc

    def encode(self) -> bytes:
        w = Writer().u32(len(self.query_pairs))
        for p in self.query_pairs:
            w.raw(p.to_bytes())
        w.u32(len(self.openings))
        for p, certs in self.openings:
            w.raw(p.to_bytes()).u32(len(certs))
            for h in certs:
                w.raw(h)
        w.u32(len(self.boundary))
        for p, h in self.boundary:
            w.raw(p.to_bytes()).raw(h)
        w.blob(self.smh.encode() if self.smh is not None else b"")
        return w.getvalue()

    @classmethod
    def decode(cls, data: bytes) -> CompletenessProof:
        try:
            r = Reader(data)
            qs = tuple(BitStringPair.from_bytes(r.raw(11)) for _ in range(r.u32()))
            ops = []
            for _ in range(r.u32()):
                p = BitStringPair.from_bytes(r.raw(11))
                n = r.u32()
                if n > r.remaining // 32:
                    raise DecodeError("certificate count exceeds input")
                ops.append((p, tuple(r.raw(32) for _ in range(n))))
            bnd = tuple((BitStringPair.from_bytes(r.raw(11)), r.raw(32)) for _ in range(r.u32()))
            raw_smh = r.blob()
            r.done()
            smh = SignedMapHead.decode(raw_smh) if raw_smh else None
        except (DecodeError, StructureError, ValueError) as exc:
            raise ProofVerificationError(f"malformed proof: {exc}") from exc
        return cls(qs, tuple(ops), bnd, smh)


def verify_proof(proof: CompletenessProof, root: bytes, model: EarthModel = WGS84) -> frozenset[bytes]:
    """Recompute the root from the proof; return every certificate hash in the openings.

    Raises ProofVerificationError on any structural problem or root mismatch.
    """
    try:
        return _verify(proof, root, model)
    except (StructureError, SortOrderError) as exc:
        raise ProofVerificationError(str(exc)) from exc


def _verify(proof: CompletenessProof, root: bytes, model: EarthModel) -> frozenset[bytes]:
    queries = proof.query_pairs
    if not queries or len(queries) > MAX_QUERY_PAIRS:
        raise ProofVerificationError("query pair count out of range")
    if any(_key(a) >= _key(b) for a, b in zip(queries, queries[1:])):
        raise ProofVerificationError("query pairs must be sorted and unique")
    for q in queries:
        validate_pair(q, model)

    opened: dict[BitStringPair, tuple[bytes, ...]] = {}
    for p, certs in proof.openings:
        if opened and _key(p) <= _key(next(reversed(opened))):
            raise ProofVerificationError("openings must be sorted and unique")
        validate_pair(p, model)
        check_sorted(certs)
        if not any(volumes_overlap(p, q) for q in queries):
            raise ProofVerificationError(f"opening {p} is unrelated to the query")
        opened[p] = certs
    for p in opened:
        if p != ROOT and node_parent(p) not in opened:
            raise ProofVerificationError(f"opening {p} is detached from the root")

    frontier: dict[BitStringPair, bytes] = {}
    for p, h in proof.boundary:
        if frontier and _key(p) <= _key(next(reversed(frontier))):
            raise ProofVerificationError("boundary entries must be sorted and unique")
        validate_pair(p, model)
        if len(h) != 32 or h == DEFAULT_HASH:
            raise ProofVerificationError("boundary hashes must be explicit non-default hashes")
        if p == ROOT or p in opened or node_parent(p) not in opened:
            raise ProofVerificationError(f"boundary entry {p} is not on the frontier")
        if any(volumes_overlap(p, q) for q in queries):
            raise ProofVerificationError(f"boundary entry {p} hides part of the query")
        frontier[p] = h

    if not opened:
        if frontier or root != DEFAULT_HASH:
            raise ProofVerificationError("absence proof requires an empty tree")
        return frozenset()
    if ROOT not in opened:
        raise ProofVerificationError("root is not opened")

    computed: dict[BitStringPair, bytes] = {}
    for p in sorted(opened, key=lambda n: n.depth, reverse=True):
        kids = []
        for c in child_slots(p, model):
            if c is None:
                kids.append(DEFAULT_HASH)
            elif c in computed:
                kids.append(computed[c])
            else:
                kids.append(frontier.get(c, DEFAULT_HASH))
        h = node_hash(p, opened[p], kids, model)
        if h == DEFAULT_HASH:
            raise ProofVerificationError(f"opening {p} is sparse")
        computed[p] = h
    if computed[ROOT] != root:
        raise ProofVerificationError("recomputed root does not match")
    return frozenset(h for certs in opened.values() for h in certs)
