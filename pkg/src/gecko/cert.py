"""GeoCerts: canonical encoding, hashing, chains, trust preferences and revocations."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence
from urllib.parse import urlsplit

import numpy as np

from . import planar
from .cover import PolygonFrustum, VolumeSpec
from .crypto import Signer, b64, sha256, unb64, verify_signature
from .ctlog import SCT
from .geo import WGS84, EarthModel
from .wire import DecodeError, Reader, Writer

log = logging.getLogger(__name__)

CERT_VERSION = 1
_CERT_TAG = b"gecko-cert\x00"
_REVOCATION_TAG = b"gecko-revocation\x00"
# attribute keys naming the entity a certificate vouches for
IDENTITY_KEYS = frozenset({"identity", "domain", "uri", "ssid"})


class CertificateError(ValueError):
    pass


class LocVerification(enum.IntEnum):
    IN_PERSON = 0
    DELEGATED = 1
    POSTAL = 2
    WIRELESS = 3
    SELF_DECLARED = 4

    @classmethod
    def parse(cls, name: str | int | LocVerification) -> LocVerification:
        if isinstance(name, int):
            return cls(name)
        return cls[str(name).upper()]

    @property
    def label(self) -> str:
        return self.name.lower()


def parse_gecko_uri(uri: str) -> tuple[str, str]:
    """Split a gecko URI into (host, remainder); raises on a wrong scheme."""
    parts = urlsplit(uri)
    if parts.scheme != "gecko" or not parts.netloc:
        raise CertificateError(f"not a gecko URI: {uri!r}")
    rest = uri[len("gecko://") + len(parts.netloc):]
    return parts.netloc.lower(), rest


def identity_host(identity: str) -> str:
    """Host part of a URI-like identity, or the lowercased identity itself."""
    parts = urlsplit(identity)
    if parts.scheme and parts.netloc:
        return parts.hostname or parts.netloc.lower()
    return identity.strip().lower()


# -- volume encoding ---------------------------------------------------------


def _write_volume(w: Writer, v: VolumeSpec) -> None:
    w.u32(len(v.frustums))
    for f in v.frustums:
        w.u32(len(f.ring))
        for lon, lat in f.ring:
            w.f64(lon).f64(lat)
        w.f64(f.alt_min).f64(f.alt_max)


def _read_volume(r: Reader) -> VolumeSpec:
    frustums = []
    for _ in range(r.u32()):
        n = r.u32()
        if n > 100_000:
            raise DecodeError("polygon vertex count out of bounds")
        ring = tuple((r.f64(), r.f64()) for _ in range(n))
        frustums.append(PolygonFrustum(ring, r.f64(), r.f64()))
    return VolumeSpec(tuple(frustums))


def volume_to_json(v: VolumeSpec) -> list:
    return [{"ring": [list(p) for p in f.ring], "alt": [f.alt_min, f.alt_max]} for f in v.frustums]


def volume_from_json(d: Sequence) -> VolumeSpec:
    return VolumeSpec(tuple(PolygonFrustum(tuple(tuple(p) for p in f["ring"]), *f["alt"]) for f in d))


# -- certificates ------------------------------------------------------------


@dataclass(frozen=True)
class GeoCert:
    subject_uri: str
    issuer_id: str
    serial: int
    volume: VolumeSpec
    attributes: tuple[tuple[str, str], ...] = ()
    loc_verification: LocVerification = LocVerification.IN_PERSON
    not_before: int = 0
    not_after: int = 0
    scts: tuple[SCT, ...] = ()
    public_key: bytes = b""
    signature: bytes = b""

    def __post_init__(self) -> None:
        object.__setattr__(self, "attributes", tuple(sorted((str(k), str(v)) for k, v in self.attributes)))
        object.__setattr__(self, "loc_verification", LocVerification.parse(self.loc_verification))
        object.__setattr__(self, "scts", tuple(self.scts))
        parse_gecko_uri(self.subject_uri)
        if not self.not_before < self.not_after:
            raise CertificateError("validity window is empty")
        if not 0 <= self.serial < 1 << 64:
            raise CertificateError("serial must fit in 64 bits")

    @property
    def ca_id(self) -> str:
        """Identifier under which this certificate acts as an issuer."""
        return parse_gecko_uri(self.subject_uri)[0]

    def _write_body(self, w: Writer) -> None:
        w.u8(CERT_VERSION).text(self.subject_uri).text(self.issuer_id).u64(self.serial)
        _write_volume(w, self.volume)
        w.u32(len(self.attributes))
        for k, v in self.attributes:
            w.text(k).text(v)
        w.u8(int(self.loc_verification)).i64(self.not_before).i64(self.not_after).blob(self.public_key)

    def tbs_bytes(self) -> bytes:
        """Bytes covered by the issuer signature and by SCTs (everything but SCTs and signature)."""
        w = Writer()
        self._write_body(w)
        return w.getvalue()

    def encode(self) -> bytes:
        w = Writer()
        self._write_body(w)
        w.u32(len(self.scts))
        for s in self.scts:
            s.write(w)
        w.blob(self.signature)
        return w.getvalue()

    @classmethod
    def decode(cls, data: bytes) -> GeoCert:
        r = Reader(data)
        try:
            if r.u8() != CERT_VERSION:
                raise DecodeError("unknown certificate version")
            subject, issuer, serial = r.text(), r.text(), r.u64()
            volume = _read_volume(r)
            attrs = tuple((r.text(), r.text()) for _ in range(r.u32()))
            lv = LocVerification(r.u8())
            nb, na = r.i64(), r.i64()
            pk = r.blob()
            scts = tuple(SCT.read(r) for _ in range(r.u32()))
            sig = r.blob()
            r.done()
            cert = cls(subject, issuer, serial, volume, attrs, lv, nb, na, scts, pk, sig)
        except (ValueError, KeyError) as exc:
            raise CertificateError(f"malformed certificate: {exc}") from exc
        if cert.encode() != bytes(data):
            raise CertificateError("non-canonical certificate encoding")
        return cert

    def signed_message(self) -> bytes:
        return _CERT_TAG + self.tbs_bytes()

    def sign(self, issuer: Signer) -> GeoCert:
        return replace(self, signature=issuer.sign(self.signed_message()))

    def verify_signature(self, issuer_key: bytes) -> bool:
        return verify_signature(issuer_key, self.signature, self.signed_message())

    def identities(self) -> set[str]:
        out = {self.ca_id}
        out.update(identity_host(v) for k, v in self.attributes if k in IDENTITY_KEYS)
        return out

    def to_json(self) -> dict:
        return {
            "subject_uri": self.subject_uri,
            "issuer_id": self.issuer_id,
            "serial": self.serial,
            "volume": volume_to_json(self.volume),
            "attributes": [list(a) for a in self.attributes],
            "loc_verification": self.loc_verification.label,
            "not_before": self.not_before,
            "not_after": self.not_after,
            "scts": [s.to_json() for s in self.scts],
            "public_key": b64(self.public_key),
            "signature": b64(self.signature),
            "hash": cert_hash(self).hex(),
        }


def cert_hash(c: GeoCert) -> bytes:
    return sha256(c.encode())


def precert_hash(c: GeoCert) -> bytes:
    """Hash of the signed body; SCTs refer to this so they can be embedded afterwards."""
    return sha256(c.tbs_bytes())


# -- containment -------------------------------------------------------------

SAMPLE_GRID = 101  # 101 x 101 = 10 201 candidate points per bounding box


def _sample_points(f: PolygonFrustum, min_points: int = 10_000) -> tuple[np.ndarray, np.ndarray]:
    x0, x1, y0, y1 = f.bbox
    ring = f.ring
    n = SAMPLE_GRID
    while True:
        xs, ys = np.meshgrid(np.linspace(x0, x1, n), np.linspace(y0, y1, n))
        xs, ys = xs.ravel(), ys.ravel()
        keep = planar.points_in_polygon(ring, xs, ys)
        if keep.sum() >= min_points or n > 1600:
            break
        n *= 2
    vx = np.array([p[0] for p in ring])
    vy = np.array([p[1] for p in ring])
    return np.concatenate([xs[keep], vx]), np.concatenate([ys[keep], vy])


def contains_volume(parent: VolumeSpec, child: VolumeSpec) -> bool:
    """Conservative containment: dense interior samples plus vertices of every child frustum."""
    for cf in child.frustums:
        hosts = [pf for pf in parent.frustums if pf.alt_min <= cf.alt_min and cf.alt_max <= pf.alt_max]
        if not hosts:
            return False
        xs, ys = _sample_points(cf)
        covered = np.zeros(xs.shape, dtype=bool)
        for pf in hosts:
            covered |= planar.points_in_polygon(pf.ring, xs, ys)
            if covered.all():
                break
        if not covered.all():
            return False
    return True


# -- chains ------------------------------------------------------------------


@dataclass(frozen=True)
class ChainReport:
    ok: bool
    index: int = -1
    reason: str = ""


def verify_chain(chain: Sequence[GeoCert], now: int) -> ChainReport:
    """Check signatures, validity windows and volume nesting, root first."""
    if not chain:
        raise CertificateError("empty chain")
    for i, c in enumerate(chain):
        parent = chain[i - 1] if i else c
        if c.issuer_id != parent.ca_id:
            return ChainReport(False, i, f"issuer {c.issuer_id!r} does not match {parent.ca_id!r}")
        if not c.verify_signature(parent.public_key):
            return ChainReport(False, i, "signature does not verify under issuer key")
        if not c.not_before <= now < c.not_after:
            return ChainReport(False, i, "outside validity window")
        if i and not contains_volume(parent.volume, c.volume):
            return ChainReport(False, i, "volume not contained in issuer volume")
    return ChainReport(True)


@dataclass
class CertificateAuthority:
    """Issuing helper: signs certificates and collects SCTs from logs."""

    cert: GeoCert
    signer: Signer

    @property
    def ca_id(self) -> str:
        return self.cert.ca_id

    @classmethod
    def create_root(cls, host: str, volume: VolumeSpec, signer: Signer | None = None,
                    not_before: int = 0, not_after: int = 1 << 62) -> CertificateAuthority:
        signer = signer or Signer.generate()
        cert = GeoCert(f"gecko://{host}", host, 1, volume, (("role", "ca"),), LocVerification.IN_PERSON,
                       not_before, not_after, (), signer.public_key).sign(signer)
        return cls(cert, signer)

    def issue(self, subject_uri: str, volume: VolumeSpec, *, serial: int,
              attributes: Iterable[tuple[str, str]] = (),
              loc_verification: LocVerification = LocVerification.IN_PERSON,
              not_before: int = 0, not_after: int = 1 << 62, public_key: bytes = b"",
              logs: Iterable = ()) -> GeoCert:
        cert = GeoCert(subject_uri, self.ca_id, serial, volume, tuple(attributes), loc_verification,
                       not_before, not_after, (), public_key).sign(self.signer)
        logs = list(logs)
        scts = [lg.submit(cert, precert=True) for lg in logs]
        if scts:
            cert = replace(cert, scts=tuple(scts))
            for lg in logs:
                lg.submit(cert)
        return cert

    def revoke(self, cert: GeoCert, revoked_at: int) -> RevocationRecord:
        return RevocationRecord(cert_hash(cert), revoked_at, self.ca_id).sign(self.signer)


# -- revocation --------------------------------------------------------------


@dataclass(frozen=True)
class RevocationRecord:
    cert_hash: bytes
    revoked_at: int
    issuer_id: str
    signature: bytes = b""

    def signed_bytes(self) -> bytes:
        return _REVOCATION_TAG + Writer().raw(self.cert_hash).i64(self.revoked_at).text(self.issuer_id).getvalue()

    def sign(self, signer: Signer) -> RevocationRecord:
        return replace(self, signature=signer.sign(self.signed_bytes()))

    def verify(self, issuer_key: bytes) -> bool:
        return len(self.cert_hash) == 32 and verify_signature(issuer_key, self.signature, self.signed_bytes())

    def encode(self) -> bytes:
        return Writer().raw(self.cert_hash).i64(self.revoked_at).text(self.issuer_id).blob(self.signature).getvalue()

    @classmethod
    def decode(cls, data: bytes) -> RevocationRecord:
        r = Reader(data)
        rec = cls(r.raw(32), r.i64(), r.text(), r.blob())
        r.done()
        return rec

    def to_json(self) -> dict:
        return {"cert_hash": self.cert_hash.hex(), "revoked_at": self.revoked_at,
                "issuer_id": self.issuer_id, "signature": b64(self.signature)}

    @classmethod
    def from_json(cls, d: Mapping) -> RevocationRecord:
        return cls(bytes.fromhex(d["cert_hash"]), int(d["revoked_at"]), str(d["issuer_id"]), unb64(d["signature"]))


# -- trust preferences and validation ----------------------------------------


class Decision(str, enum.Enum):
    ACCEPT = "accept"
    REJECT = "reject"
    CONFLICT = "conflict"


@dataclass(frozen=True)
class TrustPreferenceEntry:
    ca_id: str
    loc_verification_allowed: frozenset[LocVerification]
    region: VolumeSpec
    trust_level: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "loc_verification_allowed",
                           frozenset(LocVerification.parse(x) for x in self.loc_verification_allowed))
        if self.trust_level < 0:
            raise ValueError("trust level must be non-negative")

    def to_json(self) -> dict:
        return {"ca_id": self.ca_id,
                "loc_verification": sorted(x.label for x in self.loc_verification_allowed),
                "region": volume_to_json(self.region), "trust_level": self.trust_level}

    @classmethod
    def from_json(cls, d: Mapping, model: EarthModel = WGS84) -> TrustPreferenceEntry:
        region = d["region"]
        frustums = []
        for f in region:
            alt = f.get("alt", [model.min_alt, model.max_alt + 1])
            frustums.append(PolygonFrustum(tuple(tuple(p) for p in f["ring"]), *alt))
        return cls(str(d["ca_id"]), frozenset(d["loc_verification"]), VolumeSpec(tuple(frustums)),
                   int(d["trust_level"]))


class ConfigError(ValueError):
    pass


@dataclass
class Validation:
    decision: Decision
    reason: str
    trust_level: int | None = None
    top: list[str] = field(default_factory=list)
    matching: list[str] = field(default_factory=list)
    ignored: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"decision": self.decision.value, "reason": self.reason, "trust_level": self.trust_level,
                "top": self.top, "matching": self.matching, "ignored": self.ignored}


def identity_matches(identity: str, cert: GeoCert, exact: bool = False) -> bool:
    if exact:
        return identity == cert.subject_uri or any(
            v == identity for k, v in cert.attributes if k in IDENTITY_KEYS)
    return identity_host(identity) in cert.identities()


def validate_object(identity: str, candidates: Iterable[GeoCert], tp: Sequence[TrustPreferenceEntry],
                    query_volume: VolumeSpec, exact: bool = False) -> Validation:
    """Decide whether ``identity`` may occupy ``query_volume`` given verified candidates."""
    if not tp:
        raise ConfigError("trust preference is empty")
    region_ok: dict[int, bool] = {}

    def covers(i: int) -> bool:
        if i not in region_ok:
            region_ok[i] = contains_volume(tp[i].region, query_volume)
        return region_ok[i]

    certs = {cert_hash(c): c for c in candidates}
    levels: dict[bytes, int] = {}
    ignored = []
    for h in sorted(certs):
        c = certs[h]
        best = None
        for i, e in enumerate(tp):
            if e.ca_id != c.issuer_id or c.loc_verification not in e.loc_verification_allowed:
                continue
            if (best is None or e.trust_level > best) and covers(i):
                best = e.trust_level
        if best is None:
            ignored.append(h.hex())
        else:
            levels[h] = best
    if not levels:
        return Validation(Decision.REJECT, "no trusted certificate claims this space", ignored=ignored)
    top_level = max(levels.values())
    top = sorted(h for h, lv in levels.items() if lv == top_level)
    matching = [h for h in top if identity_matches(identity, certs[h], exact)]
    ignored += sorted(h.hex() for h, lv in levels.items() if lv < top_level)
    ev = dict(trust_level=top_level, top=[h.hex() for h in top], matching=[h.hex() for h in matching],
              ignored=sorted(ignored))
    if len(matching) == len(top):
        return Validation(Decision.ACCEPT, "every most-trusted claim names the object", **ev)
    # the space is claimed, but not (only) by the object: surface it rather than guess
    if not matching:
        return Validation(Decision.CONFLICT, "the most-trusted claims name other subjects", **ev)
    return Validation(Decision.CONFLICT, "most-trusted claims disagree on the subject", **ev)


def load_trust_preferences(data: Mapping | Sequence, model: EarthModel = WGS84) -> list[TrustPreferenceEntry]:
    entries = data["entries"] if isinstance(data, Mapping) else data
    return [TrustPreferenceEntry.from_json(e, model) for e in entries]
