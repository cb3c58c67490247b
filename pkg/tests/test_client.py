from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass

import pytest

from conftest import box, make_pki, trust_entry
from gecko.cert import CertificateAuthority, Decision, cert_hash
from gecko.client import (
    EXIT_ACCEPT,
    EXIT_CONFLICT,
    EXIT_INFRA,
    EXIT_REJECT,
    ClientConfig,
    LocalEndpoint,
    QuorumError,
    build_query,
    check,
    fetch_verified,
    filter_exact,
    verify_response,
)
from gecko.crypto import Signer
from gecko.ctlog import build_smh
from gecko.geo import GeoPoint, node_volume, point_pair, surface_prefix
from gecko.proof import ProofVerificationError

SPOT = GeoPoint(8.5417, 47.3769)
NOW = 1_800_000_000_000_000


def config_for(pki, servers, **kw) -> ClientConfig:
    kw.setdefault("trust", [trust_entry("ca.example", 5), trust_entry("peer.example", 5),
                            trust_entry("low.example", 1)])
    return ClientConfig({s.map_id: s.public_key for s in servers}, log_keys=pki.log_keys,
                        issuers=pki.issuers, **kw)


def endpoints(servers):
    return [LocalEndpoint(s) for s in servers]


def test_build_query_is_deterministic_and_small():
    a = build_query(SPOT, 10.0)
    assert a.encode() == build_query(SPOT, 10.0).encode()
    assert all(p.altitude_len == 0 for p in a.pairs)
    assert len(a.encode()) <= 128
    with pytest.raises(ValueError):
        build_query(SPOT, 0.0)


def test_union_recovers_a_cert_one_server_omits(pki):
    c = pki.issue("ca.example", "gecko://shop.example", box(SPOT.lon, SPOT.lat))
    honest = pki.map_server("honest")
    honest.ingest_cycle()
    # the second server mirrors only the log entries that came before the cert
    lagging = pki.map_server("lagging")
    assert len(lagging.state.certs) == 0
    q = build_query(SPOT, 10.0)
    res = fetch_verified(q, endpoints([honest, lagging]), config_for(pki, [honest, lagging], quorum=2), NOW)
    assert cert_hash(c) in res.certs
    assert set(res.roots) == {"honest", "lagging"} and res.excluded == {}
    alone = fetch_verified(q, endpoints([lagging]), config_for(pki, [lagging]), NOW)
    assert alone.certs == {}


def test_agreeing_servers_give_the_single_server_answer(pki):
    pki.issue("ca.example", "gecko://shop.example", box(SPOT.lon, SPOT.lat))
    a, b = pki.map_server("a"), pki.map_server("b")
    a.ingest_cycle()
    b.ingest_cycle()
    q = build_query(SPOT, 10.0)
    both = fetch_verified(q, endpoints([a, b]), config_for(pki, [a, b]), NOW)
    one = fetch_verified(q, endpoints([a]), config_for(pki, [a]), NOW)
    assert both.certs.keys() == one.certs.keys() and len(one.certs) == 1


@dataclass
class LyingEndpoint:
    """Serves another server's state under its own key: the proof does not match its SMH."""

    honest: object
    signer: Signer
    map_id: str = "liar"

    def query(self, body: bytes) -> bytes:
        doc = json.loads(self.honest.query_bytes(body))
        smh = self.honest.get_smh()
        fake = build_smh(self.map_id, b"\x42" * 32, smh.timestamp, smh.sources, self.signer)
        doc["proof"]["smh"] = fake.to_json()
        return json.dumps(doc).encode()


def test_root_mismatch_is_excluded_with_evidence(pki):
    pki.issue("ca.example", "gecko://shop.example", box(SPOT.lon, SPOT.lat))
    honest = pki.map_server("honest")
    honest.ingest_cycle()
    liar = LyingEndpoint(honest, Signer.from_seed("liar"))
    cfg = config_for(pki, [honest])
    cfg.map_keys["liar"] = liar.signer.public_key
    res = fetch_verified(build_query(SPOT, 10.0), [LocalEndpoint(honest), liar], cfg, NOW)
    assert "liar" in res.excluded and "root" in res.excluded["liar"].lower()
    (ev,) = [e for e in res.evidence if e["event"] == "server_excluded"]
    assert ev["map_id"] == "liar" and len(ev["response_sha256"]) == 64
    assert len(res.certs) == 1


def test_quorum_is_fail_closed(pki):
    honest = pki.map_server("honest")
    liar = LyingEndpoint(honest, Signer.from_seed("liar"))
    cfg = config_for(pki, [honest], quorum=2)
    cfg.map_keys["liar"] = liar.signer.public_key
    with pytest.raises(QuorumError) as info:
        fetch_verified(build_query(SPOT, 10.0), [LocalEndpoint(honest), liar], cfg, NOW)
    assert any(e["event"] == "server_excluded" for e in info.value.evidence)
    out = check("gecko://shop.example", SPOT, 10.0, None, [LocalEndpoint(honest), liar], cfg, NOW)
    assert out.exit_code == EXIT_INFRA and out.validation is None


def test_unknown_server_key_excludes(pki):
    ms = pki.map_server()
    with pytest.raises(QuorumError):
        fetch_verified(build_query(SPOT, 10.0), [LocalEndpoint(ms)], ClientConfig({}), NOW)


def test_response_for_another_query_is_refused(pki):
    ms = pki.map_server()
    q = build_query(SPOT, 10.0)
    other = build_query(GeoPoint(9.0, 47.0), 10.0)
    with pytest.raises(ProofVerificationError, match="different query"):
        verify_response(ms.query_bytes(other.encode()), q, ms.map_id, ms.public_key)
    with pytest.raises(ProofVerificationError):
        verify_response(b"not json", q, ms.map_id, ms.public_key)


def test_swapped_certificate_body_is_refused(pki):
    pki.issue("ca.example", "gecko://shop.example", box(SPOT.lon, SPOT.lat))
    decoy = pki.issue("ca.example", "gecko://decoy.example", box(-70.0, -30.0))
    ms = pki.map_server()
    ms.ingest_cycle()
    q = build_query(SPOT, 10.0)
    doc = json.loads(ms.query_bytes(q.encode()))
    doc["certificates"] = [base64.b64encode(decoy.encode()).decode()]
    with pytest.raises(ProofVerificationError, match="bodies"):
        verify_response(json.dumps(doc).encode(), q, ms.map_id, ms.public_key)


def test_revoked_expired_and_unlogged_certs_are_dropped():
    pki = make_pki(n_logs=2)
    ca = pki.cas["ca.example"]
    ok = pki.issue("ca.example", "gecko://ok.example", box(SPOT.lon, SPOT.lat))
    revoked = pki.issue("ca.example", "gecko://revoked.example", box(SPOT.lon, SPOT.lat))
    expired = pki.issue("ca.example", "gecko://old.example", box(SPOT.lon, SPOT.lat), not_before=0, not_after=10)
    one_log = ca.issue("gecko://thin.example", box(SPOT.lon, SPOT.lat), serial=500, logs=pki.logs[:1])
    for lg in pki.logs:
        lg.submit_revocation(ca.revoke(revoked, 5))
    ms = pki.map_server()
    ms.ingest_cycle()
    q = build_query(SPOT, 10.0)
    res = fetch_verified(q, [LocalEndpoint(ms)], config_for(pki, [ms], sct_quorum=2), NOW)
    assert set(res.certs) == {cert_hash(ok)}
    reasons = {e["hash"]: e["reason"] for e in res.evidence if e["event"] == "certificate_dropped"}
    assert reasons == {cert_hash(expired).hex(): "outside validity window",
                       cert_hash(one_log).hex(): "not enough valid SCTs"}
    # the revoked cert is gone from the tree; its record still travels with the response
    assert cert_hash(revoked) in res.revoked
    res1 = fetch_verified(q, [LocalEndpoint(ms)], config_for(pki, [ms], sct_quorum=1), NOW)
    assert set(res1.certs) == {cert_hash(ok), cert_hash(one_log)}


def test_filter_exact_removes_over_approximation():
    pki = make_pki()
    near = pki.issue("ca.example", "gecko://near.example", box(SPOT.lon, SPOT.lat, 3.0))
    # a coarse ingest grid files a small cert under a big cell; put one in the far corner of the
    # depth-33 cell holding the query centre so it is returned without touching the circle
    cell = node_volume(surface_prefix(point_pair(SPOT), 33))
    m_lon, m_lat = 111320 * math.cos(math.radians(SPOT.lat)), 110540
    lon = max((cell.lon_lo + 5 / m_lon, cell.lon_hi - 8 / m_lon), key=lambda x: abs(x - SPOT.lon))
    lat = max((cell.lat_lo + 5 / m_lat, cell.lat_hi - 8 / m_lat), key=lambda y: abs(y - SPOT.lat))
    far = pki.issue("ca.example", "gecko://far.example", box(lon, lat, 3.0))
    ms = pki.map_server(f_ingest=1e4)
    ms.ingest_cycle()
    assert ms.state.pairs[cert_hash(far)][0].surface_len <= 33
    q = build_query(SPOT, 10.0)
    res = fetch_verified(q, [LocalEndpoint(ms)], config_for(pki, [ms]), NOW)
    assert {cert_hash(near), cert_hash(far)} <= set(res.certs)
    filtered = filter_exact(res.certs, q.volume)
    assert cert_hash(near) in filtered and cert_hash(far) not in filtered
    assert set(filtered) <= set(res.certs)


def test_check_accept(pki):
    pki.issue("ca.example", "gecko://cafe.example", box(SPOT.lon, SPOT.lat), attributes=[("ssid", "CafeWiFi")])
    ms = pki.map_server()
    ms.ingest_cycle()
    out = check("CafeWiFi", SPOT, 10.0, None, [LocalEndpoint(ms)], config_for(pki, [ms]), NOW)
    assert out.exit_code == EXIT_ACCEPT and out.validation.decision is Decision.ACCEPT
    events = [json.loads(line)["event"] for line in out.lines()]
    assert events == ["server_verified", "query", "decision"]


def test_check_evil_twin_is_conflict(pki):
    # the cafe owns the space; an attacker's hotspot presents another identity there
    pki.issue("ca.example", "gecko://cafe.example", box(SPOT.lon, SPOT.lat), attributes=[("ssid", "CafeWiFi")])
    ms = pki.map_server()
    ms.ingest_cycle()
    out = check("FreeAirportWiFi", SPOT, 10.0, None, [LocalEndpoint(ms)], config_for(pki, [ms]), NOW)
    assert out.exit_code == EXIT_CONFLICT


def test_check_empty_location_rejects_with_absence_proof(pki):
    ms = pki.map_server()
    out = check("gecko://shop.example", SPOT, 10.0, None, [LocalEndpoint(ms)], config_for(pki, [ms]), NOW)
    assert out.exit_code == EXIT_REJECT
    (verified,) = [json.loads(x) for x in out.lines() if '"server_verified"' in x]
    assert verified["certificates"] == []


def test_check_downgrade(pki):
    pki.issue("ca.example", "gecko://shop.example", box(SPOT.lon, SPOT.lat))
    pki.issue("low.example", "gecko://evil.example", box(SPOT.lon, SPOT.lat))
    ms = pki.map_server()
    ms.ingest_cycle()
    cfg = config_for(pki, [ms])
    assert check("gecko://shop.example", SPOT, 10.0, None, [LocalEndpoint(ms)], cfg, NOW).exit_code == EXIT_ACCEPT
    assert check("gecko://evil.example", SPOT, 10.0, None, [LocalEndpoint(ms)], cfg, NOW).exit_code != EXIT_ACCEPT


def test_union_never_shrinks(pki):
    for i in range(4):
        pki.issue("ca.example", f"gecko://s{i}.example", box(SPOT.lon, SPOT.lat, 4.0 + i))
    servers = [pki.map_server(f"m{i}") for i in range(3)]
    servers[1].ingest_cycle()
    q = build_query(SPOT, 10.0)
    prev: set[bytes] = set()
    for k in range(1, 4):
        got = set(fetch_verified(q, endpoints(servers[:k]), config_for(pki, servers[:k]), NOW).certs)
        assert prev <= got
        prev = got
    assert len(prev) == 4


def test_config_from_json(tmp_path, pki):
    tp = [trust_entry("ca.example", 3).to_json()]
    (tmp_path / "tp.json").write_text(json.dumps({"entries": tp}))
    doc = {"servers": [{"map_id": "m", "url": "http://127.0.0.1:1", "public_key": "22" * 32}],
           "quorum": 1, "logs": {k: v.hex() for k, v in pki.log_keys.items()}, "sct_quorum": 2,
           "trust_preferences": "tp.json"}
    (tmp_path / "client.json").write_text(json.dumps(doc))
    cfg = ClientConfig.load(tmp_path / "client.json")
    assert cfg.sct_quorum == 2 and cfg.trust[0].trust_level == 3 and cfg.servers == {"m": "http://127.0.0.1:1"}
    with pytest.raises(ValueError):
        ClientConfig({}, quorum=0)


def test_foreign_ca_cert_is_not_trusted(pki):
    other = CertificateAuthority.create_root("rogue.example", box(0, 0, 1e6), Signer.from_seed("rogue"))
    assert other.ca_id not in pki.issuers
    c = pki.issue("ca.example", "gecko://shop.example", box(SPOT.lon, SPOT.lat))
    ms = pki.map_server()
    ms.ingest_cycle()
    cfg = config_for(pki, [ms], trust=[trust_entry("rogue.example", 9)])
    out = check("gecko://shop.example", SPOT, 10.0, None, [LocalEndpoint(ms)], cfg, NOW)
    assert out.exit_code == EXIT_REJECT
    assert cert_hash(c) in {bytes.fromhex(h) for h in out.validation.ignored}
