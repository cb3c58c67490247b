"""Command-line entry point: ``gecko <verb>``."""

from __future__ import annotations

import json
import logging
import os
import sys
import threading
from typing import Sequence

import click

from . import bench as B
from .cert import ConfigError, load_trust_preferences
from .client import (
    EXIT_INFRA,
    EXIT_REJECT,
    ClientConfig,
    QueryRequest,
    QuorumError,
    build_query,
    check as run_check,
    fetch_verified,
    verify_response,
)
from .crypto import Signer, b64, unb64
from .geo import GeoPoint
from .mapserver import decode_request

log = logging.getLogger(__name__)


def _load_json(path: str | None) -> dict:
    if not path:
        return {}
    with open(path) as fh:
        return json.load(fh)


def _endpoints(cfg: ClientConfig):
    from .api import HttpMapEndpoint

    if not cfg.servers:
        raise click.UsageError("client config lists no map servers")
    return [HttpMapEndpoint(url, map_id) for map_id, url in sorted(cfg.servers.items())]


def _client_config(path: str | None) -> ClientConfig:
    if not path:
        raise click.UsageError("--config is required")
    try:
        return ClientConfig.load(path)
    except (OSError, ValueError, KeyError) as exc:
        raise click.UsageError(f"cannot load client config: {exc}") from exc


def _alt(alt_min: float | None, alt_max: float | None) -> tuple[float, float] | None:
    if alt_min is None and alt_max is None:
        return None
    if alt_min is None or alt_max is None:
        raise click.UsageError("give both --alt-min and --alt-max or neither")
    return (alt_min, alt_max)


def _location_options(f):
    f = click.option("--alt-max", type=float, default=None, help="Upper altitude in metres.")(f)
    f = click.option("--alt-min", type=float, default=None, help="Lower altitude in metres.")(f)
    f = click.option("--radius", type=float, default=10.0, show_default=True, help="Query radius in metres.")(f)
    f = click.option("--lat", type=float, required=True)(f)
    f = click.option("--lon", type=float, required=True)(f)
    return f


@click.group()
@click.option("-v", "--verbose", count=True, help="Repeat for more log output.")
def main(verbose: int) -> None:
    """Geographic verifiable map: servers, client and benchmarks."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)


# -- client verbs ----------------------------------------------------------------


@main.command()
@_location_options
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--save", type=click.Path(dir_okay=False), default=None,
              help="Write the raw responses to this file for offline verification.")
def query(lon, lat, radius, alt_min, alt_max, config_path, save) -> None:
    """Fetch and verify certificates near a location; prints them as JSON."""
    cfg = _client_config(config_path)
    req = build_query(GeoPoint(lon, lat), radius, _alt(alt_min, alt_max), cfg.f_query, cfg.model)
    eps = _endpoints(cfg)
    raws: dict[str, bytes] = {}
    if save:
        eps = [_Recording(ep, raws) for ep in eps]
    try:
        res = fetch_verified(req, eps, cfg)
    except QuorumError as exc:
        for e in exc.evidence:
            click.echo(json.dumps(e, sort_keys=True), err=True)
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_INFRA)
    finally:
        if save:
            with open(save, "w") as fh:
                json.dump({"request": req.encode().hex(),
                           "responses": {k: b64(v) for k, v in sorted(raws.items())}}, fh, indent=1)
    out = {"pairs": [p.hex() for p in req.pairs],
           "servers": {k: v.to_json() for k, v in sorted(res.roots.items())},
           "excluded": res.excluded,
           "certificates": [c.to_json() for _, c in sorted(res.certs.items())]}
    click.echo(json.dumps(out, indent=1, sort_keys=True))


class _Recording:
    def __init__(self, ep, sink: dict[str, bytes]) -> None:
        self.ep, self.sink, self.map_id = ep, sink, ep.map_id

    def query(self, body: bytes) -> bytes:
        raw = self.ep.query(body)
        self.sink[self.map_id] = raw
        return raw


@main.command()
@click.argument("identity")
@_location_options
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--exact", is_flag=True, help="Match the identity exactly instead of by host.")
def check(identity, lon, lat, radius, alt_min, alt_max, config_path, exact) -> None:
    """Decide whether IDENTITY may claim the location.

    Prints evidence as JSON lines. Exit status: 0 accept, 1 reject,
    2 conflict, 3 infrastructure failure.
    """
    cfg = _client_config(config_path)
    if not cfg.trust:
        raise click.UsageError("client config has no trust_preferences")
    outcome = run_check(identity, GeoPoint(lon, lat), radius, _alt(alt_min, alt_max), _endpoints(cfg), cfg,
                        exact=exact)
    for line in outcome.lines():
        click.echo(line)
    sys.exit(outcome.exit_code)


@main.command("verify-proof")
@click.argument("saved", type=click.Path(exists=True, dir_okay=False))
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), required=True)
def verify_proof_cmd(saved, config_path) -> None:
    """Re-verify responses saved by ``query --save`` without contacting any server."""
    cfg = _client_config(config_path)
    doc = _load_json(saved)
    pairs = tuple(decode_request(bytes.fromhex(doc["request"])))
    req = QueryRequest(pairs, None)  # type: ignore[arg-type]
    failed = 0
    for map_id, raw in sorted(doc["responses"].items()):
        key = cfg.map_keys.get(map_id)
        if key is None:
            click.echo(json.dumps({"map_id": map_id, "ok": False, "reason": "no key configured"}))
            failed += 1
            continue
        try:
            res = verify_response(unb64(raw), req, map_id, key, cfg.model)
        except Exception as exc:
            click.echo(json.dumps({"map_id": map_id, "ok": False, "reason": str(exc)}))
            failed += 1
            continue
        click.echo(json.dumps({"map_id": map_id, "ok": True, "smh_root": res.smh.smt_root.hex(),
                               "certificates": sorted(h.hex() for h in res.certs)}))
    sys.exit(EXIT_REJECT if failed else 0)


@main.command()
@click.argument("path", type=click.Path(exists=True, dir_okay=False))
def trust(path) -> None:
    """Lint a trust-preference file."""
    try:
        entries = load_trust_preferences(_load_json(path))
    except (ConfigError, ValueError, KeyError, TypeError) as exc:
        click.echo(f"invalid: {exc}", err=True)
        sys.exit(EXIT_REJECT)
    for e in entries:
        click.echo(json.dumps(e.to_json(), sort_keys=True))
    click.echo(f"ok: {len(entries)} entries", err=True)


# -- servers -----------------------------------------------------------------


def _host_port(listen: str) -> tuple[str, int]:
    host, _, port = listen.rpartition(":")
    return host or "127.0.0.1", int(port)


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), required=True)
def serve(config_path) -> None:
    """Run a map server that mirrors its source logs over HTTP."""
    from .api import HttpLogSource, serve_map
    from .mapserver import MapServer, MapStore, ServerConfig

    cfg = ServerConfig.load(config_path)
    sources = [HttpLogSource(s.url, s.log_id) for s in cfg.sources]
    store = MapStore(cfg.storage_path) if cfg.storage_path else None
    server = MapServer(cfg.map_id, Signer.from_private_bytes(cfg.signing_key), sources,
                       {s.log_id: s.public_key for s in cfg.sources}, cfg.issuers, cfg.f_ingest, store=store)
    host, port = _host_port(cfg.listen)
    srv, _ = serve_map(server, host, port)
    server.ingest_cycle()
    server.start(cfg.ingest_interval)
    click.echo(f"map {cfg.map_id} listening on {host}:{srv.server_address[1]}", err=True)
    _wait_forever()
    server.stop()


@main.command("log-serve")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), required=True)
def log_serve(config_path) -> None:
    """Run a certificate log stub over HTTP.

    The config holds ``log_id``, ``signing_key`` (hex), ``issuers``
    (CA id to hex key), ``listen`` and an optional ``path`` for the
    append-only entry file.
    """
    from .api import serve_log
    from .logstub import LogStub

    d = _load_json(config_path)
    stub = LogStub(d["log_id"], Signer.from_private_bytes(bytes.fromhex(d["signing_key"])),
                   {k: bytes.fromhex(v) for k, v in d.get("issuers", {}).items()}, path=d.get("path"))
    host, port = _host_port(os.environ.get("GECKO_LISTEN", d.get("listen", "127.0.0.1:8600")))
    srv, _ = serve_log(stub, host, port)
    click.echo(f"log {stub.log_id} listening on {host}:{srv.server_address[1]}", err=True)
    _wait_forever()
    stub.close()


def _wait_forever() -> None:
    try:
        threading.Event().wait()
    except KeyboardInterrupt:
        pass


@main.command()
@click.option("--seed", type=str, default=None, help="Derive the key deterministically from this seed.")
def keygen(seed) -> None:
    """Print a fresh Ed25519 key pair as hex JSON."""
    s = Signer.from_seed(seed) if seed is not None else Signer.generate()
    click.echo(json.dumps({"private_key": s.private_bytes().hex(), "public_key": s.public_key.hex()}))


# -- benchmarks ------------------------------------------------------------------


BENCH_DEFAULTS = {
    "count": 100_000,
    "workers": [1, 2, 4, 8],
    "duration": 5.0,
    "latency_queries": 1000,
    "batch_sizes": [1, 10, 100, 1000],
    "certs_per_size": 1000,
    "radius": 10.0,
    "density_csv": None,
}


def _bench_settings(config_path: str | None, **overrides) -> dict:
    s = dict(BENCH_DEFAULTS)
    s.update(_load_json(config_path))
    s.update({k: v for k, v in overrides.items() if v is not None})
    return s


def _density(s: dict, seed: int) -> B.DensityMap:
    return B.DensityMap.from_csv(s["density_csv"]) if s.get("density_csv") else B.DensityMap.synthetic(seed)


def _corpus(s: dict, seed: int, corpus: str | None):
    if corpus:
        return B.read_corpus(corpus)
    return B.generate_dataset(seed, s["count"], _density(s, seed))


@main.command("gen-dataset")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--count", type=int, default=None)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
def gen_dataset(seed, config_path, count, out) -> None:
    """Generate a synthetic certificate corpus signed by the seed's benchmark CA."""
    s = _bench_settings(config_path, count=count)
    certs = B.generate_dataset(seed, s["count"], _density(s, seed))
    B.write_corpus(out, certs)
    click.echo(f"wrote {len(certs)} certificates to {out}", err=True)


@main.group()
def bench() -> None:
    """Desk-scale benchmarks writing CSV reports."""


def _bench_common(f):
    f = click.option("--out", type=click.Path(file_okay=False), default="bench-out", show_default=True)(f)
    f = click.option("--corpus", type=click.Path(exists=True, dir_okay=False), default=None,
                     help="Corpus from gen-dataset made with the same seed.")(f)
    f = click.option("--count", type=int, default=None)(f)
    f = click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)(f)
    f = click.option("--seed", type=int, default=0, show_default=True)(f)
    return f


@bench.command("ingest")
@_bench_common
def bench_ingest_cmd(seed, config_path, count, corpus, out) -> None:
    """Mean per-certificate ingest time for each batch size."""
    s = _bench_settings(config_path, count=count)
    need = sum(max(3, -(-s["certs_per_size"] // b)) * b for b in s["batch_sizes"])
    base = _corpus(s, seed, corpus)
    extra = B.generate_dataset(seed + 1, need, _density(s, seed), ca=B.bench_ca(seed))
    env = B.build_env(base, seed)
    rows = B.bench_ingest(env, extra, s["batch_sizes"], s["certs_per_size"])
    os.makedirs(out, exist_ok=True)
    B.write_csv(os.path.join(out, "ingest.csv"), rows)
    B.write_csv(os.path.join(out, "depth_histogram.csv"), B.depth_histogram(env.server))
    B.write_env(out, B.environment(seed, len(base), initial_ingest_s=round(env.ingest_s, 3)))
    _print_rows(rows)


@bench.command("qps")
@_bench_common
@click.option("--workers", type=str, default=None, help="Comma-separated worker counts.")
@click.option("--duration", type=float, default=None)
def bench_qps_cmd(seed, config_path, count, corpus, out, workers, duration) -> None:
    """Queries per second against N prefork server workers."""
    s = _bench_settings(config_path, count=count, duration=duration,
                        workers=[int(w) for w in workers.split(",")] if workers else None)
    env = B.build_env(_corpus(s, seed, corpus), seed)
    pts = B.query_points(env.certs, seed)[:2000]
    rows = B.bench_throughput(env, s["workers"], pts, s["duration"], radius=s["radius"])
    os.makedirs(out, exist_ok=True)
    B.write_csv(os.path.join(out, "throughput.csv"), rows)
    B.write_env(out, B.environment(seed, len(env.certs)))
    _print_rows(rows)


@bench.command("latency")
@_bench_common
@click.option("--queries", type=int, default=None)
@click.option("--url", default=None, help="Query a running map server instead of an in-process one.")
def bench_latency_cmd(seed, config_path, count, corpus, out, queries, url) -> None:
    """Client-side latency and message-size distributions."""
    s = _bench_settings(config_path, count=count, latency_queries=queries)
    env = B.build_env(_corpus(s, seed, corpus), seed)
    pts = B.query_points(env.certs, seed)[: s["latency_queries"]]
    rows = B.bench_latency(env, pts, url, s["radius"])
    B.write_latency_reports(out, rows)
    B.write_env(out, B.environment(seed, len(env.certs)))
    summary = {c: round(B.percentile([r[c] for r in rows], 95), 3)
               for c in ("bitstring_ms", "query_ms", "verify_ms", "total_ms", "request_bytes", "response_bytes")}
    click.echo(json.dumps({"p95": summary, "max_request_bytes": max(r["request_bytes"] for r in rows)}))


def _print_rows(rows: Sequence[dict]) -> None:
    for r in rows:
        click.echo(json.dumps(r, sort_keys=True))


@main.command("plot")
@click.option("--csv-dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Defaults to the CSV directory.")
@click.option("--format", "fmt", type=click.Choice(["png", "svg"]), default="png", show_default=True)
@click.option("--seed", type=int, default=0, help="Accepted for symmetry with the bench verbs.")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
def plot_cmd(csv_dir, out, fmt, seed, config_path) -> None:
    """Render benchmark CSVs as static figures."""
    for path in B.plot(csv_dir, out or csv_dir, fmt):
        click.echo(path)


if __name__ == "__main__":
    main()
