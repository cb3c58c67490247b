"""Append-only Merkle logs with RFC 6962 hashing, plus the signed heads built on them.

The same tree backs the certificate log stub (leaves are log entries) and
the map server's consistency tree (leaves are encoded signed map heads).
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

from .crypto import Signer, b64, sha256, unb64, verify_signature
from .wire import Reader, Writer

LEAF_PREFIX = b"\x00"
NODE_PREFIX = b"\x01"
EMPTY_ROOT = sha256(b"")

_STH_TAG = b"gecko-sth\x00"
_SCT_TAG = b"gecko-sct\x00"
_SMH_TAG = b"gecko-smh\x00"
_HEAD_TAG = b"gecko-consistency-head\x00"


class ProofError(ValueError):
    pass


def leaf_hash(data: bytes) -> bytes:
    return sha256(LEAF_PREFIX + data)


def node_hash(left: bytes, right: bytes) -> bytes:
    return sha256(NODE_PREFIX + left + right)


def _split(n: int) -> int:
    """Largest power of two strictly below n (n >= 2)."""
    return 1 << ((n - 1).bit_length() - 1)


class MerkleLog:
    """Append-only Merkle tree keeping every complete aligned subtree hash.

    Readers take ``size`` once and pass it to the proof functions; appends
    never change hashes of subtrees that are already complete, so a size
    snapshot stays consistent while a writer keeps appending.
    """

    def __init__(self, leaves: Iterable[bytes] = ()) -> None:
        self._leaves: list[bytes] = []
        self._levels: list[list[bytes]] = [[]]
        self._lock = threading.Lock()
        for leaf in leaves:
            self.append(leaf)

    @property
    def size(self) -> int:
        return len(self._levels[0])

    def __len__(self) -> int:
        return self.size

    def append(self, data: bytes) -> int:
        with self._lock:
            self._leaves.append(bytes(data))
            h = leaf_hash(data)
            level = 0
            self._levels[0].append(h)
            idx = len(self._levels[0]) - 1
            while idx & 1:
                if level + 1 == len(self._levels):
                    self._levels.append([])
                row = self._levels[level]
                h = node_hash(row[idx - 1], row[idx])
                level += 1
                self._levels[level].append(h)
                idx >>= 1
            return len(self._levels[0]) - 1

    def leaf(self, index: int) -> bytes:
        return self._leaves[index]

    def leaves(self, start: int, end: int) -> list[bytes]:
        return self._leaves[start:end]

    def _mth(self, lo: int, hi: int) -> bytes:
        n = hi - lo
        if n == 0:
            return EMPTY_ROOT
        if n & (n - 1) == 0 and lo % n == 0:
            k = n.bit_length() - 1
            return self._levels[k][lo >> k]
        k = _split(n)
        return node_hash(self._mth(lo, lo + k), self._mth(lo + k, hi))

    def root(self, size: int | None = None) -> bytes:
        size = self.size if size is None else size
        if not 0 <= size <= self.size:
            raise ProofError(f"size {size} outside [0, {self.size}]")
        return self._mth(0, size)

    def inclusion_proof(self, index: int, size: int | None = None) -> list[bytes]:
        size = self.size if size is None else size
        if not 0 <= index < size <= self.size:
            raise ProofError(f"index {index} out of range for size {size}")
        return self._path(index, 0, size)

    def _path(self, m: int, lo: int, hi: int) -> list[bytes]:
        n = hi - lo
        if n == 1:
            return []
        k = _split(n)
        if m < k:
            return self._path(m, lo, lo + k) + [self._mth(lo + k, hi)]
        return self._path(m - k, lo + k, hi) + [self._mth(lo, lo + k)]

    def consistency_proof(self, size_a: int, size_b: int | None = None) -> list[bytes]:
        size_b = self.size if size_b is None else size_b
        if not 0 <= size_a <= size_b <= self.size:
            raise ProofError(f"invalid sizes {size_a} -> {size_b}")
        if size_a == 0 or size_a == size_b:
            return []
        return self._subproof(size_a, 0, size_b, True)

    def _subproof(self, m: int, lo: int, hi: int, complete: bool) -> list[bytes]:
        n = hi - lo
        if m == n:
            return [] if complete else [self._mth(lo, hi)]
        k = _split(n)
        if m <= k:
            return self._subproof(m, lo, lo + k, complete) + [self._mth(lo + k, hi)]
        return self._subproof(m - k, lo + k, hi, False) + [self._mth(lo, lo + k)]


def verify_inclusion(leaf: bytes, index: int, size: int, path: Sequence[bytes], root: bytes) -> bool:
    """Audit path check for a raw leaf (hashed here with the leaf prefix)."""
    if not 0 <= index < size:
        return False
    fn, sn = index, size - 1
    r = leaf_hash(leaf)
    for p in path:
        if sn == 0:
            return False
        if fn & 1 or fn == sn:
            r = node_hash(p, r)
            if not fn & 1:
                while fn and not fn & 1:
                    fn >>= 1
                    sn >>= 1
        else:
            r = node_hash(r, p)
        fn >>= 1
        sn >>= 1
    return sn == 0 and r == root


def verify_consistency(root_a: bytes, size_a: int, root_b: bytes, size_b: int,
                       proof: Sequence[bytes]) -> bool:
    if not 0 <= size_a <= size_b:
        return False
    if size_a == size_b:
        return not proof and root_a == root_b
    if size_a == 0:
        return not proof and root_a == EMPTY_ROOT
    if not proof:
        return False
    path = list(proof)
    if size_a & (size_a - 1) == 0:
        path.insert(0, root_a)
    fn, sn = size_a - 1, size_b - 1
    while fn & 1:
        fn >>= 1
        sn >>= 1
    fr = sr = path[0]
    for c in path[1:]:
        if sn == 0:
            return False
        if fn & 1 or fn == sn:
            fr = node_hash(c, fr)
            sr = node_hash(c, sr)
            if not fn & 1:
                while fn and not fn & 1:
                    fn >>= 1
                    sn >>= 1
        else:
            sr = node_hash(sr, c)
        fn >>= 1
        sn >>= 1
    return sn == 0 and fr == root_a and sr == root_b


# -- signed structures -------------------------------------------------------


@dataclass(frozen=True)
class STH:
    log_id: str
    timestamp: int
    tree_size: int
    root: bytes
    signature: bytes = b""

    def signed_bytes(self) -> bytes:
        return _STH_TAG + Writer().text(self.log_id).i64(self.timestamp).u64(self.tree_size).raw(self.root).getvalue()

    def sign(self, signer: Signer) -> STH:
        return replace(self, signature=signer.sign(self.signed_bytes()))

    def verify(self, public_key: bytes) -> bool:
        return len(self.root) == 32 and verify_signature(public_key, self.signature, self.signed_bytes())

    def write(self, w: Writer) -> None:
        w.text(self.log_id).i64(self.timestamp).u64(self.tree_size).raw(self.root).blob(self.signature)

    @classmethod
    def read(cls, r: Reader) -> STH:
        return cls(r.text(), r.i64(), r.u64(), r.raw(32), r.blob())

    def to_json(self) -> dict:
        return {"log_id": self.log_id, "timestamp": self.timestamp, "tree_size": self.tree_size,
                "root": self.root.hex(), "signature": b64(self.signature)}

    @classmethod
    def from_json(cls, d: Mapping) -> STH:
        return cls(str(d["log_id"]), int(d["timestamp"]), int(d["tree_size"]),
                   bytes.fromhex(d["root"]), unb64(d["signature"]))


@dataclass(frozen=True)
class SCT:
    """Promise by a log to incorporate an entry; covers the certificate's pre-signature hash."""

    log_id: str
    timestamp: int
    cert_hash: bytes
    signature: bytes = b""

    def signed_bytes(self) -> bytes:
        return _SCT_TAG + Writer().text(self.log_id).i64(self.timestamp).raw(self.cert_hash).getvalue()

    def sign(self, signer: Signer) -> SCT:
        return replace(self, signature=signer.sign(self.signed_bytes()))

    def verify(self, public_key: bytes) -> bool:
        return len(self.cert_hash) == 32 and verify_signature(public_key, self.signature, self.signed_bytes())

    def write(self, w: Writer) -> None:
        w.text(self.log_id).i64(self.timestamp).raw(self.cert_hash).blob(self.signature)

    @classmethod
    def read(cls, r: Reader) -> SCT:
        return cls(r.text(), r.i64(), r.raw(32), r.blob())

    def to_json(self) -> dict:
        return {"log_id": self.log_id, "timestamp": self.timestamp,
                "cert_hash": self.cert_hash.hex(), "signature": b64(self.signature)}

    @classmethod
    def from_json(cls, d: Mapping) -> SCT:
        return cls(str(d["log_id"]), int(d["timestamp"]), bytes.fromhex(d["cert_hash"]), unb64(d["signature"]))


@dataclass(frozen=True)
class SignedMapHead:
    map_id: str
    smt_root: bytes
    timestamp: int
    sources: tuple[STH, ...] = ()
    signature: bytes = b""

    def signed_bytes(self) -> bytes:
        w = Writer().text(self.map_id).raw(self.smt_root).i64(self.timestamp).u32(len(self.sources))
        for sth in self.sources:
            sth.write(w)
        return _SMH_TAG + w.getvalue()

    def encode(self) -> bytes:
        """Full encoding including the signature; this is the consistency-tree leaf."""
        return Writer().raw(self.signed_bytes()).blob(self.signature).getvalue()

    @classmethod
    def decode(cls, data: bytes) -> SignedMapHead:
        r = Reader(data)
        if r.raw(len(_SMH_TAG)) != _SMH_TAG:
            raise ProofError("not a signed map head")
        map_id, root, ts = r.text(), r.raw(32), r.i64()
        sources = tuple(STH.read(r) for _ in range(r.u32()))
        sig = r.blob()
        r.done()
        return cls(map_id, root, ts, sources, sig)

    def source(self, log_id: str) -> STH | None:
        for sth in self.sources:
            if sth.log_id == log_id:
                return sth
        return None

    def to_json(self) -> dict:
        return {"map_id": self.map_id, "smt_root": self.smt_root.hex(), "timestamp": self.timestamp,
                "sources": [s.to_json() for s in self.sources], "signature": b64(self.signature)}

    @classmethod
    def from_json(cls, d: Mapping) -> SignedMapHead:
        return cls(str(d["map_id"]), bytes.fromhex(d["smt_root"]), int(d["timestamp"]),
                   tuple(STH.from_json(s) for s in d["sources"]), unb64(d["signature"]))


def build_smh(map_id: str, smt_root: bytes, timestamp: int, sources: Iterable[STH],
              signer: Signer) -> SignedMapHead:
    smh = SignedMapHead(map_id, smt_root, timestamp, tuple(sorted(sources, key=lambda s: s.log_id)))
    return replace(smh, signature=signer.sign(smh.signed_bytes()))


def verify_smh(smh: SignedMapHead, map_keys: Mapping[str, bytes],
               log_keys: Mapping[str, bytes] | None = None) -> bool:
    """Check the map server's signature and, when log keys are given, every cited STH."""
    key = map_keys.get(smh.map_id)
    if key is None or len(smh.smt_root) != 32:
        return False
    if not verify_signature(key, smh.signature, smh.signed_bytes()):
        return False
    if log_keys is not None:
        for sth in smh.sources:
            lk = log_keys.get(sth.log_id)
            if lk is None or not sth.verify(lk):
                return False
    return True


@dataclass(frozen=True)
class SignedConsistencyHead:
    map_id: str
    root: bytes
    size: int
    signature: bytes = b""

    def signed_bytes(self) -> bytes:
        return _HEAD_TAG + Writer().text(self.map_id).raw(self.root).u64(self.size).getvalue()

    def sign(self, signer: Signer) -> SignedConsistencyHead:
        return replace(self, signature=signer.sign(self.signed_bytes()))

    def verify(self, public_key: bytes) -> bool:
        return verify_signature(public_key, self.signature, self.signed_bytes())

    def to_json(self) -> dict:
        return {"map_id": self.map_id, "root": self.root.hex(), "size": self.size, "signature": b64(self.signature)}

    @classmethod
    def from_json(cls, d: Mapping) -> SignedConsistencyHead:
        return cls(str(d["map_id"]), bytes.fromhex(d["root"]), int(d["size"]), unb64(d["signature"]))


@dataclass
class ConsistencyTree:
    """Append-only history of signed map heads."""

    map_id: str
    signer: Signer
    log: MerkleLog = field(default_factory=MerkleLog)

    def append(self, smh: SignedMapHead) -> int:
        return self.log.append(smh.encode())

    @property
    def size(self) -> int:
        return self.log.size

    def smh(self, index: int) -> SignedMapHead:
        return SignedMapHead.decode(self.log.leaf(index))

    def head(self, size: int | None = None) -> SignedConsistencyHead:
        size = self.log.size if size is None else size
        return SignedConsistencyHead(self.map_id, self.log.root(size), size).sign(self.signer)

    def consistency(self, size_a: int, size_b: int) -> list[bytes]:
        return self.log.consistency_proof(size_a, size_b)

    def inclusion(self, index: int, size: int) -> list[bytes]:
        return self.log.inclusion_proof(index, size)


def heads_consistent(a: SignedConsistencyHead, b: SignedConsistencyHead, proof: Sequence[bytes]) -> bool:
    """Split-view check for two heads of the same map server (ordered by size)."""
    if a.map_id != b.map_id:
        return False
    if a.size > b.size:
        a, b = b, a
    return verify_consistency(a.root, a.size, b.root, b.size, proof)
