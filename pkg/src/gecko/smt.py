"""Persistent, path-compressed storage for the geographic sparse Merkle tree.

Only nodes that hold certificates or where two populated subtrees meet are
materialised. Every other non-sparse node has a single populated child slot
and no certificates, so its hash follows from the hash below it
(``chain_hash``). Each stored node keeps, per child slot, the nearest stored
descendant plus the hash of the slot's direct child.

Writers copy nodes on first touch within a generation. ``snapshot`` rehashes,
then bumps the generation so the returned view is never mutated again; the
writer keeps going on shared structure. Serving a snapshot while ingesting
into the writer is the two-table scheme with a pointer swap.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

from .geo import ROOT, WGS84, BitStringPair, EarthModel, validate_pair, volumes_overlap
from .proof import CompletenessProof
from .smthash import DEFAULT_HASH, chain_hash, node_hash

log = logging.getLogger(__name__)


class _Node:
    __slots__ = ("pair", "certs", "kids", "hash", "gen")

    def __init__(self, pair: BitStringPair, certs: tuple[bytes, ...], kids: list | None,
                 gen: int, hash: bytes | None = None) -> None:
        self.pair = pair
        self.certs = certs
        # per slot: None or (stored descendant, hash of the slot child or None when stale)
        self.kids = kids
        self.hash = hash
        self.gen = gen


@dataclass(frozen=True)
class SmtNode:
    pair: BitStringPair
    cert_hashes: tuple[bytes, ...]
    child_flags: tuple[bool, bool, bool, bool]


def step_slot(p: BitStringPair, t: BitStringPair) -> int:
    """Child slot of ``p`` on the path towards its strict descendant ``t``."""
    if p.altitude_len or p.surface_len == t.surface_len:
        return 2 + ((t.altitude >> (t.altitude_len - p.altitude_len - 1)) & 1)
    return (t.surface >> (t.surface_len - p.surface_len - 1)) & 1


def slot_child(p: BitStringPair, k: int) -> BitStringPair:
    s, sl, a, al = p
    if k < 2:
        return BitStringPair((s << 1) | k, sl + 1, 0, 0)
    return BitStringPair(s, sl, (a << 1) | (k - 2), al + 1)


def is_prefix_pair(a: BitStringPair, b: BitStringPair) -> bool:
    """Ancestor-or-self in the tree."""
    if a.altitude_len == 0:
        return a.surface_len <= b.surface_len and (b.surface >> (b.surface_len - a.surface_len)) == a.surface
    return (a.surface_len == b.surface_len and a.surface == b.surface and a.altitude_len <= b.altitude_len
            and (b.altitude >> (b.altitude_len - a.altitude_len)) == a.altitude)


def _lcp(x: int, xl: int, y: int, yl: int) -> tuple[int, int]:
    m = min(xl, yl)
    xa, ya = x >> (xl - m), y >> (yl - m)
    common = m - (xa ^ ya).bit_length()
    return xa >> (m - common), common


def lowest_common_ancestor(a: BitStringPair, b: BitStringPair) -> BitStringPair:
    if a.surface_len == b.surface_len and a.surface == b.surface:
        alt, al = _lcp(a.altitude, a.altitude_len, b.altitude, b.altitude_len)
        return BitStringPair(a.surface, a.surface_len, alt, al)
    s, sl = _lcp(a.surface, a.surface_len, b.surface, b.surface_len)
    return BitStringPair(s, sl, 0, 0)


class _View:
    """Read operations shared by the writer and frozen snapshots."""

    _root: _Node
    model: EarthModel

    def _find(self, pair: BitStringPair) -> tuple[_Node | None, _Node | None]:
        """(stored node equal to pair, or the stored node below it on the same edge)."""
        n = self._root
        while True:
            if n.pair == pair:
                return n, None
            if n.kids is None:
                return None, None
            e = n.kids[step_slot(n.pair, pair)]
            if e is None:
                return None, None
            c = e[0]
            if is_prefix_pair(c.pair, pair):
                n = c
                continue
            return None, (c if is_prefix_pair(pair, c.pair) else None)

    def get(self, pair: BitStringPair) -> SmtNode | None:
        """Node record, or None when the node is sparse."""
        n, below = self._find(pair)
        if n is not None:
            flags = tuple(bool(n.kids and n.kids[k]) for k in range(4))
            if not n.certs and not any(flags):
                return None
            return SmtNode(pair, n.certs, flags)  # type: ignore[arg-type]
        if below is not None:
            flags = [False] * 4
            flags[step_slot(pair, below.pair)] = True
            return SmtNode(pair, (), tuple(flags))  # type: ignore[arg-type]
        return None

    def certs_at(self, pair: BitStringPair) -> tuple[bytes, ...]:
        n, _ = self._find(pair)
        return n.certs if n is not None else ()

    def items(self) -> Iterator[tuple[BitStringPair, tuple[bytes, ...]]]:
        """Every node holding certificates, depth-first."""
        stack = [self._root]
        while stack:
            n = stack.pop()
            if n.certs:
                yield n.pair, n.certs
            if n.kids:
                stack.extend(e[0] for e in reversed(n.kids) if e is not None)

    def node_count(self) -> int:
        count, stack = 0, [self._root]
        while stack:
            n = stack.pop()
            count += 1
            if n.kids:
                stack.extend(e[0] for e in n.kids if e is not None)
        return count

    def generate_proof(self, query_pairs: Iterable[BitStringPair], smh=None) -> CompletenessProof:
        """Open every non-sparse node whose volume meets a query pair; ship hashes of the rest."""
        queries = sorted(set(query_pairs), key=BitStringPair.to_bytes)
        for q in queries:
            validate_pair(q, self.model)
        openings: dict[BitStringPair, tuple[bytes, ...]] = {}
        boundary: dict[BitStringPair, bytes] = {}
        root = self._root
        if queries and (root.certs or (root.kids and any(root.kids))):
            self._visit(ROOT, root, queries, openings, boundary)
        return CompletenessProof.build(queries, openings, boundary, smh)

    def _visit(self, pair: BitStringPair, node: _Node, queries: list[BitStringPair],
               openings: dict, boundary: dict) -> None:
        # ``node`` is the stored node at or below ``pair``; ``queries`` all meet ``pair``
        while True:
            if node.pair == pair:
                openings[pair] = node.certs
                if not node.kids:
                    return
                for k, e in enumerate(node.kids):
                    if e is None:
                        continue
                    child = slot_child(pair, k)
                    rel = [q for q in queries if volumes_overlap(q, child)]
                    if rel:
                        self._visit(child, e[0], rel, openings, boundary)
                    else:
                        boundary[child] = e[1]
                return
            # bare pass-through node above ``node``
            openings[pair] = ()
            child = slot_child(pair, step_slot(pair, node.pair))
            rel = [q for q in queries if volumes_overlap(q, child)]
            if not rel:
                boundary[child] = chain_hash(node.hash, node.pair, child.depth)
                return
            pair, queries = child, rel


class Snapshot(_View):
    """Immutable view of the tree at one generation."""

    def __init__(self, root: _Node, model: EarthModel) -> None:
        self._root = root
        self.model = model

    @property
    def root_hash(self) -> bytes:
        return self._root.hash  # type: ignore[return-value]


class SparseMerkleTree(_View):
    """Writable tree. Mutations are structural right away; hashes are recomputed lazily."""

    def __init__(self, model: EarthModel = WGS84) -> None:
        self.model = model
        self._gen = 1
        self._root = _Node(ROOT, (), None, self._gen)
        self._dirty = True

    # -- structure -----------------------------------------------------------

    def _own(self, n: _Node) -> _Node:
        if n.gen == self._gen:
            n.hash = None
            return n
        return _Node(n.pair, n.certs, list(n.kids) if n.kids else None, self._gen)

    def _new(self, pair: BitStringPair, certs: tuple[bytes, ...]) -> _Node:
        return _Node(pair, certs, None, self._gen)

    @staticmethod
    def _link(n: _Node, k: int, child: _Node | None) -> None:
        if child is None:
            if n.kids is not None:
                n.kids[k] = None
            return
        if n.kids is None:
            n.kids = [None, None, None, None]
        n.kids[k] = (child, None)

    def _insert(self, n: _Node, pair: BitStringPair, h: bytes) -> _Node:
        n = self._own(n)
        if n.pair == pair:
            if h not in n.certs:
                n.certs = tuple(sorted(n.certs + (h,)))
            return n
        k = step_slot(n.pair, pair)
        e = n.kids[k] if n.kids else None
        if e is None:
            self._link(n, k, self._new(pair, (h,)))
            return n
        c = e[0]
        if is_prefix_pair(c.pair, pair):
            self._link(n, k, self._insert(c, pair, h))
            return n
        fresh = self._new(pair, (h,))
        top = lowest_common_ancestor(c.pair, pair)
        if top == pair:
            self._link(fresh, step_slot(pair, c.pair), c)
            self._link(n, k, fresh)
        else:
            fork = self._new(top, ())
            self._link(fork, step_slot(top, c.pair), c)
            self._link(fork, step_slot(top, pair), fresh)
            self._link(n, k, fork)
        return n

    def _remove(self, n: _Node, pair: BitStringPair, h: bytes) -> tuple[_Node | None, bool]:
        if n.pair == pair:
            if h not in n.certs:
                return n, False
            n = self._own(n)
            n.certs = tuple(x for x in n.certs if x != h)
            return self._collapse(n), True
        if not n.kids:
            return n, False
        k = step_slot(n.pair, pair)
        e = n.kids[k]
        if e is None or not is_prefix_pair(e[0].pair, pair):
            return n, False
        c, changed = self._remove(e[0], pair, h)
        if not changed:
            return n, False
        n = self._own(n)
        self._link(n, k, c)
        return self._collapse(n), True

    def _collapse(self, n: _Node) -> _Node | None:
        """Drop nodes that no longer hold certificates or join two subtrees."""
        if n.pair == ROOT or n.certs:
            return n
        live = [e[0] for e in n.kids if e is not None] if n.kids else []
        if not live:
            return None
        if len(live) == 1:
            return live[0]
        return n

    # -- public mutation API ---------------------------------------------------

    def insert(self, cert_hash: bytes, pairs: Iterable[BitStringPair]) -> None:
        if len(cert_hash) != 32:
            raise ValueError("certificate hash must be 32 bytes")
        for p in pairs:
            validate_pair(p, self.model)
            self._root = self._insert(self._root, p, cert_hash)
            self._dirty = True

    def remove(self, cert_hash: bytes, pairs: Iterable[BitStringPair]) -> bool:
        removed = False
        for p in pairs:
            validate_pair(p, self.model)
            root, changed = self._remove(self._root, p, cert_hash)
            if changed:
                self._root = root  # type: ignore[assignment]
                self._dirty = removed = True
            else:
                log.warning("removal of %s at %s: not present", cert_hash.hex()[:16], p)
        return removed

    def batch_update(self, inserts: Iterable[tuple[bytes, Iterable[BitStringPair]]] = (),
                     removals: Iterable[tuple[bytes, Iterable[BitStringPair]]] = ()) -> bytes:
        for h, pairs in inserts:
            self.insert(h, pairs)
        for h, pairs in removals:
            self.remove(h, pairs)
        return self.root_hash

    # -- hashing ---------------------------------------------------------------

    def _rehash(self, n: _Node) -> None:
        kids = n.kids
        child_hashes = [DEFAULT_HASH] * 4
        if kids:
            for k in range(4):
                e = kids[k]
                if e is None:
                    continue
                top = e[1]
                if top is None:
                    c = e[0]
                    if c.hash is None:
                        self._rehash(c)
                    top = chain_hash(c.hash, c.pair, n.pair.depth + 1)
                    kids[k] = (c, top)
                child_hashes[k] = top
        n.hash = node_hash(n.pair, n.certs, child_hashes, self.model)

    @property
    def root_hash(self) -> bytes:
        if self._root.hash is None:
            self._rehash(self._root)
        self._dirty = False
        return self._root.hash  # type: ignore[return-value]

    def hash_of(self, pair: BitStringPair) -> bytes:
        """Hash of any node, stored or not."""
        self.root_hash
        n, below = self._find(pair)
        if n is not None:
            return n.hash  # type: ignore[return-value]
        if below is not None:
            return chain_hash(below.hash, below.pair, pair.depth)  # type: ignore[arg-type]
        return DEFAULT_HASH

    def generate_proof(self, query_pairs: Iterable[BitStringPair], smh=None) -> CompletenessProof:
        self.root_hash  # child hashes may be stale after mutations
        return super().generate_proof(query_pairs, smh)

    def snapshot(self) -> Snapshot:
        self.root_hash
        snap = Snapshot(self._root, self.model)
        self._gen += 1
        return snap


def build_tree(entries: Iterable[tuple[bytes, Sequence[BitStringPair]]], model: EarthModel = WGS84) -> SparseMerkleTree:
    t = SparseMerkleTree(model)
    for h, pairs in entries:
        t.insert(h, pairs)
    return t
