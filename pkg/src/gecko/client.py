"""Relying-party side: build covers, query several map servers, verify, union and validate."""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Protocol, Sequence

from .cert import (
    CertificateError,
    GeoCert,
    RevocationRecord,
    TrustPreferenceEntry,
    Validation,
    cert_hash,
    load_trust_preferences,
    precert_hash,
    validate_object,
)
from .cover import VolumeSpec, circle_volume, cover_volume, volumes_overlap
from .crypto import now_us, sha256, unb64
from .ctlog import SignedMapHead, verify_smh
from .geo import WGS84, BitStringPair, EarthModel, GeoPoint
from .mapserver import encode_request
from .proof import CompletenessProof, ProofVerificationError, verify_proof

log = logging.getLogger(__name__)

DEFAULT_F_QUERY = 1.0

EXIT_ACCEPT = 0
EXIT_REJECT = 1
EXIT_CONFLICT = 2
EXIT_INFRA = 3


class QuorumError(RuntimeError):
    """Too few map servers returned verifiable answers."""

    def __init__(self, msg: str, evidence: list[dict]) -> None:
        super().__init__(msg)
        self.evidence = evidence


class MapEndpoint(Protocol):
    map_id: str

    def query(self, body: bytes) -> bytes: ...


@dataclass
class LocalEndpoint:
    """In-process endpoint around a MapServer (or anything with ``query_bytes``)."""

    server: object
    map_id: str = ""

    def __post_init__(self) -> None:
        self.map_id = self.map_id or self.server.map_id  # type: ignore[attr-defined]

    def query(self, body: bytes) -> bytes:
        return self.server.query_bytes(body)  # type: ignore[attr-defined]


@dataclass(frozen=True)
class QueryRequest:
    pairs: tuple[BitStringPair, ...]
    volume: VolumeSpec

    def encode(self) -> bytes:
        return encode_request(self.pairs)


@dataclass
class ServerResult:
    map_id: str
    smh: SignedMapHead
    certs: dict[bytes, GeoCert]
    revocations: list[RevocationRecord]
    proof: CompletenessProof
    raw_size: int = 0


@dataclass
class VerifiedResult:
    certs: dict[bytes, GeoCert]
    roots: dict[str, SignedMapHead]
    excluded: dict[str, str] = field(default_factory=dict)
    evidence: list[dict] = field(default_factory=list)
    revoked: set[bytes] = field(default_factory=set)
    filtered: dict[bytes, GeoCert] = field(default_factory=dict)


@dataclass
class ClientConfig:
    map_keys: dict[str, bytes]
    quorum: int = 1
    log_keys: dict[str, bytes] = field(default_factory=dict)
    sct_quorum: int = 1
    issuers: dict[str, bytes] = field(default_factory=dict)
    trust: list[TrustPreferenceEntry] = field(default_factory=list)
    f_query: float = DEFAULT_F_QUERY
    servers: dict[str, str] = field(default_factory=dict)
    model: EarthModel = WGS84

    def __post_init__(self) -> None:
        if self.quorum < 1 or self.sct_quorum < 1:
            raise ValueError("quorum values must be at least 1")

    @classmethod
    def from_json(cls, d: Mapping, base_dir: str = ".") -> ClientConfig:
        trust: list[TrustPreferenceEntry] = []
        tp = d.get("trust_preferences")
        if isinstance(tp, str):
            with open(os.path.join(base_dir, tp)) as fh:
                trust = load_trust_preferences(json.load(fh))
        elif tp is not None:
            trust = load_trust_preferences(tp)
        servers = d.get("servers", [])
        return cls(
            map_keys={s["map_id"]: bytes.fromhex(s["public_key"]) for s in servers},
            quorum=int(d.get("quorum", 1)),
            log_keys={k: bytes.fromhex(v) for k, v in d.get("logs", {}).items()},
            sct_quorum=int(d.get("sct_quorum", 1)),
            issuers={k: bytes.fromhex(v) for k, v in d.get("issuers", {}).items()},
            trust=trust,
            f_query=float(d.get("f_query", DEFAULT_F_QUERY)),
            servers={s["map_id"]: s["url"] for s in servers},
        )

    @classmethod
    def load(cls, path: str | os.PathLike) -> ClientConfig:
        with open(path) as fh:
            return cls.from_json(json.load(fh), os.path.dirname(os.path.abspath(path)))


def build_query(center: GeoPoint, radius: float, alt: tuple[float, float] | None = None,
                f: float = DEFAULT_F_QUERY, model: EarthModel = WGS84) -> QueryRequest:
    volume = circle_volume(center, radius, alt, model)
    pairs = tuple(sorted(cover_volume(volume, f, model), key=BitStringPair.to_bytes))
    return QueryRequest(pairs, volume)


def verify_response(raw: bytes, request: QueryRequest, map_id: str, map_key: bytes,
                    model: EarthModel = WGS84) -> ServerResult:
    """Check one server's answer end to end; raises ValueError subclasses on any failure."""
    try:
        doc = json.loads(raw)
        proof = CompletenessProof.from_json(doc["proof"])
        bodies = [unb64(c) for c in doc["certificates"]]
        revs = [RevocationRecord.from_json(r) for r in doc.get("revocations", [])]
    except (ValueError, KeyError, TypeError) as exc:
        raise ProofVerificationError(f"malformed response: {exc}") from exc
    smh = proof.smh
    if smh is None or smh.map_id != map_id:
        raise ProofVerificationError("response lacks this server's signed map head")
    if not verify_smh(smh, {map_id: map_key}):
        raise ProofVerificationError("signed map head signature does not verify")
    if tuple(proof.query_pairs) != tuple(sorted(set(request.pairs), key=BitStringPair.to_bytes)):
        raise ProofVerificationError("proof answers a different query")
    hashes = verify_proof(proof, smh.smt_root, model)
    certs: dict[bytes, GeoCert] = {}
    for body in bodies:
        try:
            c = GeoCert.decode(body)
        except CertificateError as exc:
            raise ProofVerificationError(f"undecodable certificate: {exc}") from exc
        certs[cert_hash(c)] = c
    if set(certs) != set(hashes):
        raise ProofVerificationError("certificate bodies do not match the proven hashes")
    return ServerResult(map_id, smh, certs, revs, proof, len(raw))


def sct_count(cert: GeoCert, log_keys: Mapping[str, bytes], now: int) -> int:
    ph = precert_hash(cert)
    good = set()
    for sct in cert.scts:
        key = log_keys.get(sct.log_id)
        if key is not None and sct.cert_hash == ph and sct.timestamp <= now and sct.verify(key):
            good.add(sct.log_id)
    return len(good)


def fetch_verified(request: QueryRequest, endpoints: Sequence[MapEndpoint], config: ClientConfig,
                   now: int | None = None, parallel: bool = True) -> VerifiedResult:
    """Query every endpoint, keep those whose answers verify, and union their certificates."""
    now = now_us() if now is None else now
    body = request.encode()

    def one(ep: MapEndpoint):
        key = config.map_keys.get(ep.map_id)
        if key is None:
            return ep.map_id, None, "no key configured for this server", b""
        raw = b""
        try:
            raw = ep.query(body)
            return ep.map_id, verify_response(raw, request, ep.map_id, key, config.model), None, raw
        except Exception as exc:  # any failure excludes the server
            return ep.map_id, None, f"{type(exc).__name__}: {exc}", raw

    if parallel and len(endpoints) > 1:
        with ThreadPoolExecutor(max_workers=len(endpoints)) as pool:
            outcomes = list(pool.map(one, endpoints))
    else:
        outcomes = [one(ep) for ep in endpoints]

    result = VerifiedResult({}, {})
    verified: list[ServerResult] = []
    for map_id, res, err, raw in sorted(outcomes, key=lambda o: o[0]):
        if res is None:
            result.excluded[map_id] = err  # type: ignore[assignment]
            result.evidence.append({"event": "server_excluded", "map_id": map_id, "reason": err,
                                    "response_sha256": sha256(raw).hex() if raw else None,
                                    "response_size": len(raw)})
            continue
        verified.append(res)
        result.roots[map_id] = res.smh
        result.evidence.append({"event": "server_verified", "map_id": map_id, "smh": res.smh.to_json(),
                                "certificates": sorted(h.hex() for h in res.certs)})
    if len(verified) < config.quorum:
        raise QuorumError(f"{len(verified)} of {len(endpoints)} servers verified, quorum is {config.quorum}",
                          result.evidence)

    union: dict[bytes, GeoCert] = {}
    for res in verified:
        union.update(res.certs)
        for rec in res.revocations:
            key = config.issuers.get(rec.issuer_id)
            if key is not None and rec.verify(key):
                result.revoked.add(rec.cert_hash)
    for h in sorted(union):
        c = union[h]
        reason = None
        if h in result.revoked:
            reason = "revoked"
        elif c.issuer_id in config.issuers and not c.verify_signature(config.issuers[c.issuer_id]):
            reason = "issuer signature does not verify"
        elif not c.not_before <= now < c.not_after:
            reason = "outside validity window"
        elif sct_count(c, config.log_keys, now) < config.sct_quorum:
            reason = "not enough valid SCTs"
        if reason:
            result.evidence.append({"event": "certificate_dropped", "hash": h.hex(), "reason": reason})
        else:
            result.certs[h] = c
    return result


def filter_exact(certs: Mapping[bytes, GeoCert], volume: VolumeSpec) -> dict[bytes, GeoCert]:
    """Drop certificates whose claimed volume misses the query volume."""
    return {h: c for h, c in certs.items() if volumes_overlap(c.volume, volume)}


@dataclass
class CheckOutcome:
    validation: Validation | None
    exit_code: int
    evidence: list[dict]

    def lines(self) -> list[str]:
        return [json.dumps(e, sort_keys=True) for e in self.evidence]


_EXIT = {"accept": EXIT_ACCEPT, "reject": EXIT_REJECT, "conflict": EXIT_CONFLICT}


def check(identity: str, center: GeoPoint, radius: float, alt: tuple[float, float] | None,
          endpoints: Sequence[MapEndpoint], config: ClientConfig, now: int | None = None,
          exact: bool = False) -> CheckOutcome:
    """Full validation: cover, fetch, verify, filter, then apply the trust preference."""
    request = build_query(center, radius, alt, config.f_query, config.model)
    try:
        res = fetch_verified(request, endpoints, config, now)
    except QuorumError as exc:
        ev = exc.evidence + [{"event": "decision", "decision": "error", "reason": str(exc)}]
        return CheckOutcome(None, EXIT_INFRA, ev)
    res.filtered = filter_exact(res.certs, request.volume)
    validation = validate_object(identity, res.filtered.values(), config.trust, request.volume, exact)
    ev = list(res.evidence)
    ev.append({"event": "query", "pairs": [p.hex() for p in request.pairs],
               "filtered": sorted(h.hex() for h in res.filtered)})
    ev.append({"event": "decision", "identity": identity, **validation.to_json()})
    return CheckOutcome(validation, _EXIT[validation.decision.value], ev)
