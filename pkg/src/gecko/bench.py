"""Synthetic corpora and the benchmark harness (ingest, throughput, latency and sizes)."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import multiprocessing as mp
import os
import platform
import random
import socket
import time
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .cert import CertificateAuthority, GeoCert, LocVerification
from .client import ClientConfig, QueryRequest, build_query, verify_response
from .cover import PolygonFrustum, VolumeSpec
from .crypto import Signer
from .geo import WGS84, EarthModel, GeoPoint
from .logstub import LogStub
from .mapserver import MapServer
from .wire import Reader, Writer

log = logging.getLogger(__name__)

MAX_PAYLOAD = 3328  # 3.25 KiB
CORPUS_MAGIC = b"GECKO-CORPUS-1\n"
# base timestamps keep corpora byte-identical across runs
EPOCH_US = 1_700_000_000_000_000
YEAR_US = 365 * 24 * 3600 * 1_000_000

# (lon, lat, weight, sigma in degrees): a rough picture of where sites cluster
_CLUSTERS = (
    (-0.13, 51.51, 1.0, 0.6), (2.35, 48.86, 0.9, 0.6), (13.40, 52.52, 0.7, 0.5),
    (-3.70, 40.42, 0.6, 0.7), (12.50, 41.90, 0.6, 0.6), (8.54, 47.37, 0.4, 0.4),
    (21.01, 52.23, 0.4, 0.6), (18.07, 59.33, 0.3, 0.5), (4.90, 52.37, 0.5, 0.4),
    (16.37, 48.21, 0.4, 0.4), (-9.14, 38.72, 0.3, 0.4), (23.73, 37.98, 0.3, 0.4),
    (10.0, 50.0, 1.5, 4.0),
)


@dataclass
class DensityMap:
    """Relative site density on a regular lon/lat grid (row = latitude band)."""

    density: np.ndarray
    lon0: float = -180.0
    lat0: float = -90.0
    step: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        self.density = np.asarray(self.density, dtype=float)
        if (self.density < 0).any() or not self.density.sum() > 0:
            raise ValueError("densities must be non-negative and not all zero")

    @classmethod
    def synthetic(cls, seed: int = 0, step: float = 0.25) -> DensityMap:
        """Mixture of Gaussian clusters with seeded jitter, zero outside the region of interest."""
        rng = np.random.default_rng(seed)
        lon0, lat0 = -15.0, 34.0
        nx, ny = int(round(50 / step)), int(round(32 / step))
        lons = lon0 + (np.arange(nx) + 0.5) * step
        lats = lat0 + (np.arange(ny) + 0.5) * step
        gx, gy = np.meshgrid(lons, lats)
        dens = np.zeros_like(gx)
        for lon, lat, w, sig in _CLUSTERS:
            lon += rng.normal(0, 0.1)
            lat += rng.normal(0, 0.1)
            w *= rng.uniform(0.8, 1.2)
            dens += w * np.exp(-((gx - lon) ** 2 + (gy - lat) ** 2) / (2 * sig * sig))
        dens[dens < 1e-3 * dens.max()] = 0.0
        return cls(dens, lon0, lat0, step, seed)

    @classmethod
    def from_csv(cls, path: str | os.PathLike, step: float | None = None) -> DensityMap:
        """Load ``lon,lat,density`` rows (cell lower-left corners on a regular grid)."""
        rows = []
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                rows.append((float(rec["lon"]), float(rec["lat"]), float(rec["density"])))
        lons = sorted({r[0] for r in rows})
        lats = sorted({r[1] for r in rows})
        if step is None:
            diffs = [b - a for a, b in zip(lons, lons[1:])] + [b - a for a, b in zip(lats, lats[1:])]
            step = min(diffs) if diffs else 1.0
        nx = int(round((lons[-1] - lons[0]) / step)) + 1
        ny = int(round((lats[-1] - lats[0]) / step)) + 1
        dens = np.zeros((ny, nx))
        for lon, lat, d in rows:
            dens[int(round((lat - lats[0]) / step)), int(round((lon - lons[0]) / step))] = d
        return cls(dens, lons[0], lats[0], step)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """``n`` points (lon, lat), uniform inside cells drawn by density."""
        flat = self.density.ravel()
        cells = rng.choice(flat.size, size=n, p=flat / flat.sum())
        iy, ix = np.divmod(cells, self.density.shape[1])
        lon = self.lon0 + (ix + rng.random(n)) * self.step
        lat = self.lat0 + (iy + rng.random(n)) * self.step
        return np.stack([lon, lat], axis=1)


def square_volume(lon: float, lat: float, size_m: float, base: float, height_m: float,
                  model: EarthModel = WGS84) -> VolumeSpec:
    """A ``size_m`` square (south-west corner at lon/lat) extruded by ``height_m``."""
    a, b = model.r_a, model.r_b
    e2 = 1.0 - (b * b) / (a * a)
    phi = math.radians(lat)
    w = math.sqrt(1.0 - e2 * math.sin(phi) ** 2)
    dlat = math.degrees(size_m / (a * (1.0 - e2) / w ** 3))
    dlon = math.degrees(size_m / (a / w * math.cos(phi)))
    return VolumeSpec.of(PolygonFrustum.rectangle(lon, lon + dlon, lat, lat + dlat, base, base + height_m))


def bench_ca(seed: int, model: EarthModel = WGS84) -> CertificateAuthority:
    world = VolumeSpec.of(PolygonFrustum.rectangle(-180, 180, -90, 90, model.min_alt, model.max_alt + 1))
    return CertificateAuthority.create_root("bench-ca.example", world, Signer.from_seed(f"bench-ca-{seed}"),
                                            EPOCH_US, EPOCH_US + 10 * YEAR_US)


def generate_dataset(seed: int, count: int, density: DensityMap | None = None,
                     ca: CertificateAuthority | None = None, model: EarthModel = WGS84) -> list[GeoCert]:
    """Deterministic corpus of 10 m x 10 m x 3 m site certificates."""
    if count < 1:
        raise ValueError("count must be at least 1")
    density = density or DensityMap.synthetic(seed)
    ca = ca or bench_ca(seed, model)
    rng = np.random.default_rng(seed)
    out: list[GeoCert] = []
    serial = 0
    while len(out) < count:
        need = count - len(out)
        pts = density.sample(rng, need)
        bases = rng.uniform(model.min_alt, model.max_alt + 1 - 3, need)
        for (lon, lat), base in zip(pts, bases):
            serial += 1
            host = f"site{serial}.bench.example"
            key = hashlib.sha256(f"{seed}/{serial}".encode()).digest()
            cert = ca.issue(f"gecko://{host}", square_volume(float(lon), float(lat), 10.0, float(round(base, 2)), 3.0, model),
                            serial=serial, attributes=(("identity", host), ("use", "payment terminal")),
                            loc_verification=LocVerification.IN_PERSON,
                            not_before=EPOCH_US, not_after=EPOCH_US + 2 * YEAR_US, public_key=key)
            if len(cert.encode()) > MAX_PAYLOAD:
                continue
            out.append(cert)
    return out


def write_corpus(path: str | os.PathLike, certs: Iterable[GeoCert]) -> None:
    with open(path, "wb") as fh:
        fh.write(CORPUS_MAGIC)
        for c in certs:
            fh.write(Writer().blob(c.encode()).getvalue())


def read_corpus(path: str | os.PathLike) -> list[GeoCert]:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(CORPUS_MAGIC):
        raise ValueError("not a corpus file")
    r = Reader(data[len(CORPUS_MAGIC):])
    out = []
    while r.remaining:
        out.append(GeoCert.decode(r.blob()))
    return out


def query_points(certs: Sequence[GeoCert], seed: int) -> list[GeoPoint]:
    """One point per certificate (inside its footprint), shuffled."""
    rng = random.Random(seed)
    pts = []
    for c in certs:
        x0, x1, y0, y1 = c.volume.frustums[0].bbox
        pts.append(GeoPoint(rng.uniform(x0, x1), rng.uniform(y0, y1)))
    rng.shuffle(pts)
    return pts


# -- environment ---------------------------------------------------------------


@dataclass
class BenchEnv:
    """CA, log and map server populated with a corpus, all in-process."""

    ca: CertificateAuthority
    log: LogStub
    server: MapServer
    certs: list[GeoCert]
    ingest_s: float

    def client_config(self) -> ClientConfig:
        return ClientConfig({self.server.map_id: self.server.public_key},
                            log_keys={self.log.log_id: self.log.public_key}, sct_quorum=1,
                            issuers={self.ca.ca_id: self.ca.signer.public_key})


def build_env(certs: Sequence[GeoCert], seed: int, f_ingest: float = 0.1, batch: int = 10_000,
              model: EarthModel = WGS84, log_scts: bool = True) -> BenchEnv:
    """Submit the corpus to a log (with SCTs embedded) and ingest it in batches."""
    ca = bench_ca(seed, model)
    clock = iter(range(EPOCH_US + 1, 1 << 62))
    stub = LogStub("bench-log", Signer.from_seed(f"bench-log-{seed}"), {ca.ca_id: ca.signer.public_key},
                   clock=lambda: next(clock))
    server = MapServer("bench-map", Signer.from_seed(f"bench-map-{seed}"), [stub],
                       {stub.log_id: stub.public_key}, {ca.ca_id: ca.signer.public_key}, f_ingest, model,
                       clock=lambda: next(clock))
    final = []
    ingest = 0.0
    for i in range(0, len(certs), batch):
        for c in certs[i:i + batch]:
            if log_scts:
                sct = stub.submit(c, precert=True)
                c = GeoCert(c.subject_uri, c.issuer_id, c.serial, c.volume, c.attributes, c.loc_verification,
                            c.not_before, c.not_after, (sct,), c.public_key, c.signature)
            stub.submit(c)
            final.append(c)
        t0 = time.perf_counter()
        server.ingest_cycle()
        ingest += time.perf_counter() - t0
    return BenchEnv(ca, stub, server, final, ingest)


# -- ingest benchmark ----------------------------------------------------------


def bench_ingest(env: BenchEnv, extra: Sequence[GeoCert], batch_sizes: Sequence[int],
                 certs_per_size: int = 1000, min_batches: int = 3) -> list[dict]:
    """Mean wall-clock ingest time per certificate for each batch size.

    Each cycle covers fetching from the log, signature checks, covering,
    tree update, rehash, table swap and signing a new head.
    """
    rows = []
    pos = 0
    for b in batch_sizes:
        n_batches = max(min_batches, math.ceil(certs_per_size / b))
        total, done = 0.0, 0
        for _ in range(n_batches):
            chunk = extra[pos:pos + b]
            if len(chunk) < b:
                raise ValueError("not enough extra certificates for the ingest benchmark")
            pos += b
            for c in chunk:
                env.log.submit(c)
            t0 = time.perf_counter()
            env.server.ingest_cycle()
            total += time.perf_counter() - t0
            done += len(chunk)
        rows.append({"batch_size": b, "batches": n_batches, "certificates": done,
                     "total_s": round(total, 6), "mean_ms_per_cert": round(1000 * total / done, 4)})
        log.info("ingest batch %d: %.3f ms/cert", b, 1000 * total / done)
    return rows


# -- throughput benchmark ------------------------------------------------------


def _serve_worker(sock: socket.socket, server: MapServer) -> None:
    from http.server import ThreadingHTTPServer

    from .api import map_handler

    class _Pre(ThreadingHTTPServer):
        daemon_threads = True

        def server_bind(self) -> None:
            pass

        def server_activate(self) -> None:
            pass

    srv = _Pre(sock.getsockname(), map_handler(server), bind_and_activate=False)
    srv.socket = sock
    srv.serve_forever()


class PreforkMapService:
    """Map server answering over HTTP from ``workers`` forked processes sharing one socket.

    Each worker serves the snapshot current at fork time; this is the
    query path under load, with ingestion quiesced.
    """

    def __init__(self, server: MapServer, workers: int, host: str = "127.0.0.1") -> None:
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self.sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self.sock.bind((host, 0))
        self.sock.listen(1024)
        self.url = "http://%s:%d" % self.sock.getsockname()
        ctx = mp.get_context("fork")
        self.procs = [ctx.Process(target=_serve_worker, args=(self.sock, server), daemon=True) for _ in range(workers)]
        for p in self.procs:
            p.start()

    def close(self) -> None:
        for p in self.procs:
            p.terminate()
        for p in self.procs:
            p.join()
        self.sock.close()


def _load_worker(url: str, map_id: str, map_key: bytes, requests: list[tuple[bytes, tuple]], duration: float,
                 out: mp.Queue) -> None:
    from .api import HttpMapEndpoint
    from .geo import BitStringPair

    ep = HttpMapEndpoint(url, map_id)
    verified: dict[int, bytes] = {}
    done = errors = bad = 0
    i = 0
    deadline = time.perf_counter() + duration
    while time.perf_counter() < deadline:
        idx = i % len(requests)
        body, pairs = requests[idx]
        i += 1
        try:
            raw = ep.query(body)
        except Exception:
            errors += 1
            continue
        digest = hashlib.sha256(raw).digest()
        if verified.get(idx) != digest:
            # responses for a fixed snapshot are deterministic: verify each distinct one in full
            req = QueryRequest(tuple(BitStringPair(*p) for p in pairs), None)  # type: ignore[arg-type]
            try:
                verify_response(raw, req, map_id, map_key)
                verified[idx] = digest
            except Exception:
                bad += 1
                continue
        done += 1
    out.put((done, errors, bad, len(verified)))


def bench_throughput(env: BenchEnv, worker_counts: Sequence[int], points: Sequence[GeoPoint],
                     duration: float = 5.0, clients: int | None = None, radius: float = 10.0) -> list[dict]:
    """Queries per second served by N server worker processes under a closed-loop load."""
    reqs = []
    for p in points:
        q = build_query(p, radius)
        reqs.append((q.encode(), tuple(tuple(x) for x in q.pairs)))
    rows = []
    ctx = mp.get_context("fork")
    for w in worker_counts:
        svc = PreforkMapService(env.server, w)
        try:
            n_clients = clients or max(2, 2 * w)
            q: mp.Queue = ctx.Queue()
            share = [reqs[i::n_clients] for i in range(n_clients)]
            procs = [ctx.Process(target=_load_worker, args=(svc.url, env.server.map_id, env.server.public_key,
                                                            share[i] or reqs, duration, q)) for i in range(n_clients)]
            t0 = time.perf_counter()
            for p in procs:
                p.start()
            results = [q.get() for _ in procs]
            elapsed = time.perf_counter() - t0
            for p in procs:
                p.join()
        finally:
            svc.close()
        done = sum(r[0] for r in results)
        rows.append({"workers": w, "clients": n_clients, "duration_s": round(duration, 3),
                     "queries": done, "qps": round(done / duration, 2), "errors": sum(r[1] for r in results),
                     "failed_verification": sum(r[2] for r in results), "wall_s": round(elapsed, 3)})
        log.info("throughput %d workers: %.1f qps", w, done / duration)
    return rows


# -- latency and size benchmark -----------------------------------------------


def bench_latency(env: BenchEnv, points: Sequence[GeoPoint], url: str | None = None,
                  radius: float = 10.0) -> list[dict]:
    """Per-query client-side timings split into cover, round trip and verification."""
    from .api import HttpMapEndpoint, serve_map

    srv = None
    if url is None:
        srv, _ = serve_map(env.server)
        url = "http://%s:%d" % srv.server_address[:2]
    ep = HttpMapEndpoint(url, env.server.map_id)
    rows = []
    try:
        for p in points:
            t0 = time.perf_counter()
            req = build_query(p, radius)
            body = req.encode()
            t1 = time.perf_counter()
            raw = ep.query(body)
            t2 = time.perf_counter()
            res = verify_response(raw, req, env.server.map_id, env.server.public_key)
            t3 = time.perf_counter()
            rows.append({"bitstring_ms": round(1000 * (t1 - t0), 4), "query_ms": round(1000 * (t2 - t1), 4),
                         "verify_ms": round(1000 * (t3 - t2), 4), "total_ms": round(1000 * (t3 - t0), 4),
                         "request_bytes": len(body), "response_bytes": len(raw), "pairs": len(req.pairs),
                         "certificates": len(res.certs)})
    finally:
        if srv is not None:
            srv.shutdown()
            srv.server_close()
    return rows


# -- reports -------------------------------------------------------------------


def percentile(values: Sequence[float], q: float) -> float:
    return float(np.percentile(np.asarray(values, dtype=float), q))


def cdf_rows(values: Sequence[float], name: str) -> list[dict]:
    vs = np.sort(np.asarray(values, dtype=float))
    n = len(vs)
    return [{"series": name, "value": float(v), "cdf": (i + 1) / n} for i, v in enumerate(vs)]


def write_csv(path: str | os.PathLike, rows: Sequence[dict]) -> None:
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        w.writeheader()
        w.writerows(rows)


def write_latency_reports(out_dir: str | os.PathLike, rows: Sequence[dict]) -> None:
    os.makedirs(out_dir, exist_ok=True)
    write_csv(os.path.join(out_dir, "latency.csv"), rows)
    cdf = []
    for col in ("bitstring_ms", "query_ms", "verify_ms", "total_ms"):
        cdf += cdf_rows([r[col] for r in rows], col)
    write_csv(os.path.join(out_dir, "latency_cdf.csv"), cdf)
    sizes = cdf_rows([r["request_bytes"] for r in rows], "request_bytes")
    sizes += cdf_rows([r["response_bytes"] for r in rows], "response_bytes")
    write_csv(os.path.join(out_dir, "size_cdf.csv"), sizes)


def environment(seed: int, corpus: int, **extra) -> dict:
    return {"python": platform.python_version(), "platform": platform.platform(),
            "cpu_count": os.cpu_count(), "seed": seed, "corpus": corpus, **extra}


def write_env(out_dir: str | os.PathLike, meta: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "environment.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def depth_histogram(server: MapServer) -> list[dict]:
    """Number of certificate placements per surface depth."""
    counts: dict[int, int] = {}
    for pair, certs in server.state.tree.items():
        counts[pair.surface_len] = counts.get(pair.surface_len, 0) + len(certs)
    return [{"surface_depth": d, "placements": counts[d]} for d in sorted(counts)]


def plot(csv_dir: str | os.PathLike, out_dir: str | os.PathLike, fmt: str = "png") -> list[str]:
    """Render the CSV reports found in ``csv_dir`` as static figures."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    os.makedirs(out_dir, exist_ok=True)
    written = []

    def load(name: str) -> list[dict]:
        path = os.path.join(csv_dir, name)
        if not os.path.exists(path):
            return []
        with open(path, newline="") as fh:
            return list(csv.DictReader(fh))

    def save(fig, name: str) -> None:
        path = os.path.join(out_dir, f"{name}.{fmt}")
        fig.savefig(path, bbox_inches="tight")
        plt.close(fig)
        written.append(path)

    rows = load("throughput.csv")
    if rows:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.plot([int(r["workers"]) for r in rows], [float(r["qps"]) for r in rows], marker="o")
        ax.set_xlabel("server workers")
        ax.set_ylabel("queries per second")
        ax.grid(alpha=0.3)
        save(fig, "throughput")
    rows = load("ingest.csv")
    if rows:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.plot([int(r["batch_size"]) for r in rows], [float(r["mean_ms_per_cert"]) for r in rows], marker="o")
        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.set_xlabel("batch size")
        ax.set_ylabel("mean ingest time per certificate [ms]")
        ax.grid(alpha=0.3)
        save(fig, "ingest")
    rows = load("depth_histogram.csv")
    if rows:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.bar([int(r["surface_depth"]) for r in rows], [int(r["placements"]) for r in rows])
        ax.set_xlabel("surface depth")
        ax.set_ylabel("certificate placements")
        save(fig, "depth_histogram")
    for name, xlabel in (("latency_cdf.csv", "latency [ms]"), ("size_cdf.csv", "size [bytes]")):
        rows = load(name)
        if not rows:
            continue
        fig, ax = plt.subplots(figsize=(5, 3.5))
        series: dict[str, tuple[list, list]] = {}
        for r in rows:
            xs, ys = series.setdefault(r["series"], ([], []))
            xs.append(float(r["value"]))
            ys.append(float(r["cdf"]))
        for s, (xs, ys) in series.items():
            ax.step(xs, ys, where="post", label=s)
        ax.set_xscale("log")
        ax.set_xlabel(xlabel)
        ax.set_ylabel("CDF")
        ax.legend()
        ax.grid(alpha=0.3)
        save(fig, name.replace(".csv", ""))
    return written
