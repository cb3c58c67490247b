"""Map server: mirrors certificate logs into the SMT and answers location queries."""

from __future__ import annotations

import json
import logging
import os
import sqlite3
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

from .cert import CertificateError, GeoCert, RevocationRecord, cert_hash, precert_hash
from .cover import cover_volume
from .crypto import Signer, b64, now_us
from .ctlog import STH, ConsistencyTree, MerkleLog, SignedMapHead, build_smh, verify_consistency
from .geo import WGS84, BitStringPair, EarthModel, StructureError, validate_pair, volumes_overlap
from .logstub import EntryType, LogEntry, LogSource
from .proof import MAX_QUERY_PAIRS
from .smt import Snapshot, SparseMerkleTree
from .wire import DecodeError

log = logging.getLogger(__name__)

DEFAULT_F_INGEST = 0.1
FETCH_CHUNK = 1000


class QueryError(ValueError):
    """Client error: the request is malformed or too large."""


class NotReady(RuntimeError):
    pass


# -- deterministic ingestion ---------------------------------------------------


class IngestState:
    """Turns log entries into SMT content. Replaying the same entries gives the same tree.

    The outcome depends only on the set of entries: certificates that decode,
    carry a valid issuer signature and valid SCTs from known logs are
    inserted; a revocation signed by the certificate's issuer removes it
    whether it arrives before or after the certificate.
    """

    def __init__(self, issuers: Mapping[str, bytes], log_keys: Mapping[str, bytes],
                 f_ingest: float = DEFAULT_F_INGEST, model: EarthModel = WGS84) -> None:
        if f_ingest <= 0:
            raise ValueError("ingest grid size must be positive")
        self.issuers = dict(issuers)
        self.log_keys = dict(log_keys)
        self.f = f_ingest
        self.model = model
        self.tree = SparseMerkleTree(model)
        self.certs: dict[bytes, bytes] = {}
        self.cert_issuer: dict[bytes, str] = {}
        self.pairs: dict[bytes, tuple[BitStringPair, ...]] = {}
        self.revoked: dict[bytes, RevocationRecord] = {}
        self.pending: dict[bytes, list[RevocationRecord]] = {}
        self.rejected = 0

    def apply(self, raw: bytes) -> None:
        try:
            entry = LogEntry.decode(raw)
        except ValueError:
            self.rejected += 1
            return
        if entry.kind == EntryType.CERT:
            self._apply_cert(entry.payload)
        elif entry.kind == EntryType.REVOCATION:
            self._apply_revocation(entry.payload)

    def _cert_ok(self, cert: GeoCert) -> bool:
        key = self.issuers.get(cert.issuer_id)
        if key is None or not cert.verify_signature(key):
            return False
        ph = precert_hash(cert)
        for sct in cert.scts:
            lk = self.log_keys.get(sct.log_id)
            if lk is not None and (sct.cert_hash != ph or not sct.verify(lk)):
                return False
        return True

    def _apply_cert(self, payload: bytes) -> None:
        try:
            cert = GeoCert.decode(payload)
        except CertificateError as exc:
            log.warning("skipping undecodable certificate: %s", exc)
            self.rejected += 1
            return
        h = cert_hash(cert)
        if h in self.certs:
            return
        if not self._cert_ok(cert):
            log.warning("skipping certificate %s: signature or SCT check failed", h.hex()[:16])
            self.rejected += 1
            return
        try:
            pairs = tuple(sorted(cover_volume(cert.volume, self.f, self.model), key=BitStringPair.to_bytes))
        except ValueError as exc:
            log.warning("skipping certificate %s: %s", h.hex()[:16], exc)
            self.rejected += 1
            return
        self.certs[h] = payload
        self.cert_issuer[h] = cert.issuer_id
        self.pairs[h] = pairs
        for rec in self.pending.pop(h, []):
            if rec.issuer_id == cert.issuer_id:
                self.revoked[h] = rec
                return
        self.tree.insert(h, pairs)

    def _apply_revocation(self, payload: bytes) -> None:
        try:
            rec = RevocationRecord.decode(payload)
        except (DecodeError, ValueError):
            self.rejected += 1
            return
        key = self.issuers.get(rec.issuer_id)
        if key is None or not rec.verify(key):
            self.rejected += 1
            return
        h = rec.cert_hash
        if h in self.revoked:
            return
        if h not in self.certs:
            self.pending.setdefault(h, []).append(rec)
            return
        if self.cert_issuer[h] != rec.issuer_id:
            self.rejected += 1
            return
        self.revoked[h] = rec
        self.tree.remove(h, self.pairs[h])


def replay_root(smh: SignedMapHead, sources: Mapping[str, LogSource], issuers: Mapping[str, bytes],
                log_keys: Mapping[str, bytes], f_ingest: float = DEFAULT_F_INGEST,
                model: EarthModel = WGS84) -> bytes:
    """Auditor check: rebuild the tree from the log prefixes an SMH cites."""
    state = IngestState(issuers, log_keys, f_ingest, model)
    for sth in smh.sources:
        src = sources[sth.log_id]
        mirror = MerkleLog()
        for start in range(0, sth.tree_size, FETCH_CHUNK):
            for raw in src.get_entries(start, min(start + FETCH_CHUNK, sth.tree_size)):
                mirror.append(raw)
                state.apply(raw)
        if mirror.size != sth.tree_size or mirror.root() != sth.root:
            raise ValueError(f"log {sth.log_id} prefix does not match the cited STH")
    return state.tree.root_hash


# -- persistence -------------------------------------------------------------


class MapStore:
    """sqlite persistence for mirrored log entries, source STHs and issued SMHs."""

    def __init__(self, path: str | os.PathLike) -> None:
        self._db = sqlite3.connect(str(path), check_same_thread=False)
        self._lock = threading.Lock()
        with self._db:
            self._db.execute("CREATE TABLE IF NOT EXISTS mirror (log_id TEXT, idx INTEGER, data BLOB, PRIMARY KEY (log_id, idx))")
            self._db.execute("CREATE TABLE IF NOT EXISTS sth (log_id TEXT PRIMARY KEY, data TEXT)")
            self._db.execute("CREATE TABLE IF NOT EXISTS smh (idx INTEGER PRIMARY KEY, data BLOB)")

    def save_cycle(self, entries: Mapping[str, tuple[int, Sequence[bytes]]], sths: Mapping[str, STH],
                   smh_index: int, smh: SignedMapHead) -> None:
        with self._lock, self._db:
            for log_id, (start, rows) in entries.items():
                self._db.executemany("INSERT OR REPLACE INTO mirror VALUES (?, ?, ?)",
                                     ((log_id, start + i, r) for i, r in enumerate(rows)))
            for log_id, sth in sths.items():
                self._db.execute("INSERT OR REPLACE INTO sth VALUES (?, ?)", (log_id, json.dumps(sth.to_json())))
            self._db.execute("INSERT OR REPLACE INTO smh VALUES (?, ?)", (smh_index, smh.encode()))

    def mirrors(self) -> dict[str, list[bytes]]:
        out: dict[str, list[bytes]] = {}
        for log_id, data in self._db.execute("SELECT log_id, data FROM mirror ORDER BY log_id, idx"):
            out.setdefault(log_id, []).append(data)
        return out

    def sths(self) -> dict[str, STH]:
        return {k: STH.from_json(json.loads(v)) for k, v in self._db.execute("SELECT log_id, data FROM sth")}

    def smhs(self) -> list[SignedMapHead]:
        return [SignedMapHead.decode(d) for (d,) in self._db.execute("SELECT data FROM smh ORDER BY idx")]

    def close(self) -> None:
        self._db.close()


# -- server ------------------------------------------------------------------


@dataclass
class _Serving:
    snapshot: Snapshot
    smh: SignedMapHead
    index: int


def parse_query_pairs(pairs: Iterable[BitStringPair], model: EarthModel = WGS84) -> list[BitStringPair]:
    qs = sorted(set(pairs), key=BitStringPair.to_bytes)
    if not 1 <= len(qs) <= MAX_QUERY_PAIRS:
        raise QueryError(f"a query needs 1 to {MAX_QUERY_PAIRS} distinct pairs")
    for q in qs:
        try:
            validate_pair(q, model)
        except StructureError as exc:
            raise QueryError(str(exc)) from exc
    for i, a in enumerate(qs):
        for b in qs[i + 1:]:
            if volumes_overlap(a, b):
                raise QueryError(f"query pairs {a} and {b} overlap")
    return qs


def encode_request(pairs: Iterable[BitStringPair]) -> bytes:
    """Compact binary request body: pair count then 11 bytes per pair."""
    qs = sorted(set(pairs), key=BitStringPair.to_bytes)
    return bytes((len(qs),)) + b"".join(p.to_bytes() for p in qs)


def decode_request(body: bytes) -> list[BitStringPair]:
    if not body:
        raise QueryError("empty request")
    if body[:1] == b"{":
        try:
            doc = json.loads(body)
            return [BitStringPair.fromhex(h) for h in doc["pairs"]]
        except (ValueError, KeyError, TypeError, StructureError) as exc:
            raise QueryError(f"malformed JSON query: {exc}") from exc
    n = body[0]
    if len(body) != 1 + 11 * n:
        raise QueryError("binary query length mismatch")
    try:
        return [BitStringPair.from_bytes(body[1 + 11 * i: 12 + 11 * i]) for i in range(n)]
    except StructureError as exc:
        raise QueryError(str(exc)) from exc


class MapServer:
    def __init__(self, map_id: str, signer: Signer, sources: Sequence[LogSource],
                 log_keys: Mapping[str, bytes], issuers: Mapping[str, bytes],
                 f_ingest: float = DEFAULT_F_INGEST, model: EarthModel = WGS84,
                 clock: Callable[[], int] = now_us, store: MapStore | None = None) -> None:
        if not sources:
            raise ValueError("a map server needs at least one source log")
        self.map_id = map_id
        self.signer = signer
        self.sources = {s.log_id: s for s in sources}
        self.log_keys = dict(log_keys)
        self.model = model
        self.clock = clock
        self.state = IngestState(issuers, log_keys, f_ingest, model)
        self.mirrors = {lid: MerkleLog() for lid in self.sources}
        self.sths: dict[str, STH] = {}
        self.quarantined: dict[str, str] = {}
        self.alerts: list[str] = []
        self.history = ConsistencyTree(map_id, signer)
        self.store = store
        self._ingest_lock = threading.Lock()
        self._serving: _Serving | None = None
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        if store is not None:
            self._restore(store)
        if self._serving is None:
            self._publish({})

    @property
    def public_key(self) -> bytes:
        return self.signer.public_key

    @property
    def f_ingest(self) -> float:
        return self.state.f

    def _restore(self, store: MapStore) -> None:
        for log_id, rows in store.mirrors().items():
            if log_id not in self.mirrors:
                continue
            for raw in rows:
                self.mirrors[log_id].append(raw)
                self.state.apply(raw)
        self.sths = {k: v for k, v in store.sths().items() if k in self.sources}
        smhs = store.smhs()
        for smh in smhs:
            self.history.append(smh)
        if smhs:
            last = smhs[-1]
            if self.state.tree.root_hash != last.smt_root:
                raise RuntimeError("restored tree does not match the last signed map head")
            self._serving = _Serving(self.state.tree.snapshot(), last, len(smhs) - 1)
            log.info("map %s: restored %d heads, %d certificates", self.map_id, len(smhs), len(self.state.certs))

    def _alert(self, msg: str) -> None:
        log.error("map %s: %s", self.map_id, msg)
        self.alerts.append(msg)

    def _quarantine(self, log_id: str, reason: str) -> None:
        self.quarantined[log_id] = reason
        self._alert(f"source {log_id} quarantined: {reason}")

    def _pull(self, src: LogSource) -> list[bytes] | None:
        """Fetch and verify new entries of one source; None when the source is skipped."""
        log_id = src.log_id
        try:
            sth = src.get_sth()
        except Exception as exc:  # network errors of any kind skip this source
            self._alert(f"source {log_id} unreachable: {exc}")
            return None
        if sth.log_id != log_id or not sth.verify(self.log_keys[log_id]):
            self._quarantine(log_id, "STH signature does not verify")
            return None
        mirror = self.mirrors[log_id]
        old = mirror.size
        if sth.tree_size < old:
            self._quarantine(log_id, "tree size went backwards")
            return None
        if sth.tree_size == old:
            if sth.root != mirror.root():
                self._quarantine(log_id, "STH root differs from mirrored log")
                return None
            self.sths[log_id] = sth
            return []
        try:
            if old:
                proof = src.get_consistency(old, sth.tree_size)
                if not verify_consistency(mirror.root(), old, sth.root, sth.tree_size, proof):
                    self._quarantine(log_id, "log is not an extension of the mirrored prefix")
                    return None
            fresh: list[bytes] = []
            while old + len(fresh) < sth.tree_size:
                start = old + len(fresh)
                chunk = src.get_entries(start, min(start + FETCH_CHUNK, sth.tree_size))
                if not chunk:
                    raise IOError("log returned no entries")
                fresh.extend(chunk)
        except Exception as exc:
            self._alert(f"source {log_id} fetch failed: {exc}")
            return None
        fresh = fresh[: sth.tree_size - old]
        for raw in fresh:
            mirror.append(raw)
        if mirror.root() != sth.root:
            self._quarantine(log_id, "entries do not match the STH root")
            return None
        self.sths[log_id] = sth
        return fresh

    def ingest_cycle(self) -> SignedMapHead:
        """Pull every source, update the shadow tree, swap, and publish a new head."""
        with self._ingest_lock:
            new: dict[str, tuple[int, list[bytes]]] = {}
            for log_id in sorted(self.sources):
                if log_id in self.quarantined:
                    continue
                start = self.mirrors[log_id].size
                fresh = self._pull(self.sources[log_id])
                if fresh:
                    new[log_id] = (start, fresh)
            for log_id in sorted(new):
                for raw in new[log_id][1]:
                    self.state.apply(raw)
            return self._publish(new)

    def _publish(self, new: Mapping[str, tuple[int, Sequence[bytes]]]) -> SignedMapHead:
        snap = self.state.tree.snapshot()
        ts = self.clock()
        if self._serving is not None and ts <= self._serving.smh.timestamp:
            ts = self._serving.smh.timestamp + 1
        smh = build_smh(self.map_id, snap.root_hash, ts, self.sths.values(), self.signer)
        index = self.history.append(smh)
        if self.store is not None:
            self.store.save_cycle(new, self.sths, index, smh)
        # single reference assignment: in-flight queries keep the previous table
        self._serving = _Serving(snap, smh, index)
        return smh

    # -- queries ---------------------------------------------------------------

    def serving(self) -> _Serving:
        s = self._serving
        if s is None:
            raise NotReady("no signed map head yet")
        return s

    def handle_query(self, pairs: Iterable[BitStringPair]) -> dict:
        qs = parse_query_pairs(pairs, self.model)
        s = self.serving()
        proof = s.snapshot.generate_proof(qs, s.smh)
        hashes = sorted(proof.cert_hashes())
        certs = [b64(self.state.certs[h]) for h in hashes]
        revs = []
        for h, rec in self.state.revoked.items():
            if any(volumes_overlap(p, q) for p in self.state.pairs.get(h, ()) for q in qs):
                revs.append(rec.to_json())
        revs.sort(key=lambda r: r["cert_hash"])
        return {"proof": proof.to_json(), "certificates": certs, "revocations": revs}

    def query_bytes(self, body: bytes) -> bytes:
        return json.dumps(self.handle_query(decode_request(body)), separators=(",", ":")).encode()

    def get_cert(self, h: bytes) -> bytes | None:
        return self.state.certs.get(h)

    def get_smh(self, index: int | None = None) -> SignedMapHead:
        if index is None:
            return self.serving().smh
        return self.history.smh(index)

    def get_consistency(self, size_a: int, size_b: int) -> list[bytes]:
        return self.history.consistency(size_a, size_b)

    def consistency_head(self):
        return self.history.head()

    # -- background ingestion --------------------------------------------------

    def start(self, interval_s: float) -> None:
        def loop() -> None:
            while not self._stop.wait(interval_s):
                try:
                    self.ingest_cycle()
                except Exception:
                    log.exception("ingest cycle failed")

        self._thread = threading.Thread(target=loop, name=f"ingest-{self.map_id}", daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join()
        if self.store is not None:
            self.store.close()


# -- configuration -----------------------------------------------------------


@dataclass
class SourceConfig:
    log_id: str
    url: str
    public_key: bytes


@dataclass
class ServerConfig:
    map_id: str
    signing_key: bytes
    sources: list[SourceConfig]
    issuers: dict[str, bytes]
    listen: str = "127.0.0.1:8700"
    ingest_interval: float = 10.0
    f_ingest: float = DEFAULT_F_INGEST
    workers: int = 8
    storage_path: str | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.f_ingest <= 0:
            raise ValueError("f_ingest must be positive")
        if not self.sources:
            raise ValueError("at least one source log is required")

    @classmethod
    def from_json(cls, d: Mapping, env: Mapping[str, str] | None = None) -> ServerConfig:
        env = os.environ if env is None else env
        cfg = cls(
            map_id=d["map_id"],
            signing_key=bytes.fromhex(d["signing_key"]),
            sources=[SourceConfig(s["log_id"], s["url"], bytes.fromhex(s["public_key"])) for s in d["sources"]],
            issuers={k: bytes.fromhex(v) for k, v in d.get("issuers", {}).items()},
            listen=d.get("listen", "127.0.0.1:8700"),
            ingest_interval=float(d.get("ingest_interval", 10.0)),
            f_ingest=float(d.get("f_ingest", DEFAULT_F_INGEST)),
            workers=int(d.get("workers", 8)),
            storage_path=d.get("storage_path"),
        )
        cfg.listen = env.get("GECKO_LISTEN", cfg.listen)
        cfg.storage_path = env.get("GECKO_STORAGE", cfg.storage_path)
        return cfg

    @classmethod
    def load(cls, path: str | os.PathLike) -> ServerConfig:
        with open(path) as fh:
            return cls.from_json(json.load(fh))
