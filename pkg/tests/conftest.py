from __future__ import annotations

import hashlib
import math
import random
from dataclasses import dataclass, field

import pytest

from gecko.cert import CertificateAuthority, LocVerification, TrustPreferenceEntry
from gecko.cover import PolygonFrustum, VolumeSpec
from gecko.crypto import Signer
from gecko.geo import WGS84, BitStringPair, EarthModel
from gecko.logstub import LogStub
from gecko.mapserver import MapServer

# tiny tree: 5 surface bits, 2 altitude bits; small enough to enumerate
SMALL = EarthModel(bits_x=3, bits_y=2, bits_z=2, min_alt=0)

EMPTY = hashlib.sha256(b"\x00").digest()


def sha(b: bytes) -> bytes:
    return hashlib.sha256(b).digest()


def oracle_hasher(nodes: dict[tuple[str, str], set[bytes]], model: EarthModel):
    """Node hash function computed from bit-string node names alone.

    ``nodes`` maps (surface, altitude) strings to cert hashes. The node set is
    materialized by walking every non-empty node's path to the root.
    """
    live: set[tuple[str, str]] = set()
    for (s, a), certs in nodes.items():
        if not certs:
            continue
        while True:
            if (s, a) in live:
                break
            live.add((s, a))
            if a:
                a = a[:-1]
            elif s:
                s = s[:-1]
            else:
                break

    def h(s: str, a: str) -> bytes:
        if (s, a) not in live:
            return EMPTY
        certs = sorted(nodes.get((s, a), ()))
        if len(a) == model.bits_z:
            return sha(b"\x00" + b"".join(certs))
        if a == "" and len(s) < model.bits_x + model.bits_y:
            kids = [h(s + "0", ""), h(s + "1", ""), h(s, "0"), h(s, "1")]
        else:
            kids = [EMPTY, EMPTY, h(s, a + "0"), h(s, a + "1")]
        body = b"\x01" + b"".join(kids)
        if certs:
            body += sha(b"".join(certs))
        return sha(body)

    return h


def oracle_root(nodes: dict[tuple[str, str], set[bytes]], model: EarthModel) -> bytes:
    return oracle_hasher(nodes, model)("", "")


def random_pair(model: EarthModel, rng: random.Random) -> BitStringPair:
    sl = rng.randint(0, model.bits_x + model.bits_y)
    al = rng.randint(0, model.bits_z) if rng.random() < 0.6 else 0
    return BitStringPair(rng.getrandbits(sl) if sl else 0, sl, rng.getrandbits(al) if al else 0, al)


def box(lon: float, lat: float, size: float = 10.0, alt: tuple[float, float] = (400.0, 403.0)) -> VolumeSpec:
    dl = size / (111320 * math.cos(math.radians(lat)))
    dt = size / 110540
    return VolumeSpec.of(PolygonFrustum.rectangle(lon, lon + dl, lat, lat + dt, *alt))


WORLD = VolumeSpec.of(PolygonFrustum.rectangle(-180, 180, -90, 90, WGS84.min_alt, WGS84.max_alt + 1))


class Clock:
    """Strictly increasing fake microsecond clock."""

    def __init__(self, start: int = 1_700_000_000_000_000) -> None:
        self.t = start

    def __call__(self) -> int:
        self.t += 1000
        return self.t


@dataclass
class Pki:
    cas: dict[str, CertificateAuthority]
    logs: list[LogStub]
    clock: Clock
    serial: int = 0
    servers: list[MapServer] = field(default_factory=list)

    @property
    def issuers(self) -> dict[str, bytes]:
        return {k: ca.signer.public_key for k, ca in self.cas.items()}

    @property
    def log_keys(self) -> dict[str, bytes]:
        return {lg.log_id: lg.public_key for lg in self.logs}

    def issue(self, ca: str, subject: str, volume: VolumeSpec, **kw):
        self.serial += 1
        kw.setdefault("not_before", 0)
        kw.setdefault("not_after", 1 << 62)
        return self.cas[ca].issue(subject, volume, serial=self.serial, logs=self.logs, **kw)

    def map_server(self, name: str = "map1", logs=None, **kw) -> MapServer:
        ms = MapServer(name, Signer.from_seed(name), logs or self.logs, self.log_keys, self.issuers,
                       clock=self.clock, **kw)
        self.servers.append(ms)
        return ms


def make_pki(ca_names=("ca.example",), n_logs: int = 2) -> Pki:
    clock = Clock()
    cas = {n: CertificateAuthority.create_root(n, WORLD, Signer.from_seed(n), 0, 1 << 62) for n in ca_names}
    issuers = {k: ca.signer.public_key for k, ca in cas.items()}
    logs = [LogStub(f"log{i}", Signer.from_seed(f"log{i}"), issuers, clock=clock) for i in range(n_logs)]
    return Pki(cas, logs, clock)


@pytest.fixture
def pki() -> Pki:
    return make_pki(("ca.example", "low.example", "peer.example"))


def trust_entry(ca: str, level: int, region: VolumeSpec = WORLD, methods=None) -> TrustPreferenceEntry:
    return TrustPreferenceEntry(ca, frozenset(methods or LocVerification), region, level)


def random_polygon(rng: random.Random, max_extent_m: float = 50_000.0, min_extent_m: float = 5.0):
    """Star-shaped (hence simple) polygon with a log-uniform size, away from poles and the antimeridian."""
    lon0, lat0 = rng.uniform(-170, 170), rng.uniform(-75, 75)
    size = math.exp(rng.uniform(math.log(min_extent_m), math.log(max_extent_m)))
    n = rng.randint(3, 12)
    ring = []
    for k in range(n):
        # jittered even spacing keeps every angular gap below pi
        t = 2 * math.pi * (k + rng.uniform(-0.2, 0.2)) / n
        r = size * rng.uniform(0.3, 1.0)
        ring.append((lon0 + r * math.cos(t) / (111320 * math.cos(math.radians(lat0))),
                     lat0 + r * math.sin(t) / 110540))
    return ring


# -- RFC 6962 reference -----------------------------------------------------------


def mth(leaves: list[bytes]) -> bytes:
    """Merkle tree hash written straight from the recursive definition."""
    n = len(leaves)
    if n == 0:
        return sha(b"")
    if n == 1:
        return sha(b"\x00" + leaves[0])
    k = 1
    while k * 2 < n:
        k *= 2
    return sha(b"\x01" + mth(leaves[:k]) + mth(leaves[k:]))


def proof_ranges(m: int, n: int) -> list[tuple[int, int]]:
    """Leaf ranges whose hashes make up the consistency proof from size m to n."""
    def sub(m, lo, hi, complete):
        if m == hi - lo:
            return [] if complete else [(lo, hi)]
        k = 1
        while k * 2 < hi - lo:
            k *= 2
        if m <= k:
            return sub(m, lo, lo + k, complete) + [(lo + k, hi)]
        return sub(m - k, lo + k, hi, False) + [(lo, lo + k)]
    return [] if m in (0, n) else sub(m, 0, n, True)


def fork_accepts(n_max: int, verify) -> list[tuple]:
    """Try every proof built from genuine subtree hashes of an honest and a forked history.

    For each m < n <= n_max and each replaced leaf r < m, position k of the
    proof may take the hash of its leaf range from the prefix, from the honest
    extension or from the fork. Returns every combination the verifier accepts.
    """
    import itertools

    accepted = []
    base = [b"leaf-%d" % i for i in range(n_max)]
    for n in range(2, n_max + 1):
        honest = base[:n]
        for m in range(1, n):
            ranges = proof_ranges(m, n)
            root_a = mth(honest[:m])
            for r in range(m):
                forked = honest[:r] + [b"evil-%d" % r] + honest[r + 1:]
                root_b = mth(forked)
                choices = []
                for lo, hi in ranges:
                    opts = {mth(honest[lo:hi]), mth(forked[lo:hi])}
                    if hi <= m:
                        opts.add(mth(honest[:m][lo:hi]))
                    choices.append(sorted(opts))
                for proof in itertools.product(*choices):
                    if verify(root_a, m, root_b, n, list(proof)):
                        accepted.append((m, n, r, proof))
    return accepted


# -- acceptance summary -------------------------------------------------------------

# criterion number -> (title, list of (test name, passed)), filled by the report hook
CRITERIA: dict[int, tuple[str, list[tuple[str, bool]]]] = {}
# free-form measurements printed next to the verdicts
CRITERIA_NOTES: dict[int, list[str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    entry = CRITERIA.setdefault(n, (title, []))
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        entry[1].append((item.name, rep.passed))


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(CRITERIA):
        title, results = CRITERIA[n]
        ok = bool(results) and all(p for _, p in results)
        failed = [name for name, p in results if not p]
        line = f"criterion {n} ({title}): {'PASS' if ok else 'FAIL'}"
        if failed:
            line += "  failing: " + ", ".join(failed)
        tr.write_line(line)
        for note in CRITERIA_NOTES.get(n, []):
            tr.write_line(f"    {note}")
