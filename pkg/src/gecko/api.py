"""HTTP/JSON transport for the map server and the log stub, plus matching clients."""

from __future__ import annotations

import http.client
import json
import logging
import socket
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable
from urllib.parse import parse_qs, urlencode, urlsplit

from .cert import GeoCert, RevocationRecord
from .crypto import b64, unb64
from .ctlog import SCT, STH, ProofError, SignedConsistencyHead, SignedMapHead
from .logstub import LogStub, SubmissionError
from .mapserver import MapServer, NotReady, QueryError

log = logging.getLogger(__name__)

MAX_BODY = 1 << 20


class HttpError(Exception):
    def __init__(self, status: int, message: str) -> None:
        super().__init__(message)
        self.status = status


Route = Callable[[dict, bytes], object]


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    # headers and body go out in separate writes; avoid the delayed-ACK stall
    disable_nagle_algorithm = True
    routes: dict[tuple[str, str], Route] = {}
    prefix_routes: dict[tuple[str, str], Route] = {}

    def log_message(self, fmt: str, *args) -> None:
        log.debug("%s %s", self.address_string(), fmt % args)

    def _dispatch(self, method: str) -> None:
        parts = urlsplit(self.path)
        params = {k: v[-1] for k, v in parse_qs(parts.query).items()}
        length = int(self.headers.get("Content-Length") or 0)
        if length > MAX_BODY:
            self._send(413, {"error": "request too large"})
            return
        body = self.rfile.read(length) if length else b""
        route = self.routes.get((method, parts.path))
        if route is None:
            for (m, prefix), r in self.prefix_routes.items():
                if m == method and parts.path.startswith(prefix):
                    params["_rest"] = parts.path[len(prefix):]
                    route = r
                    break
        if route is None:
            self._send(404, {"error": f"no route for {method} {parts.path}"})
            return
        try:
            out = route(params, body)
        except HttpError as exc:
            self._send(exc.status, {"error": str(exc)})
            return
        except (QueryError, SubmissionError, ProofError, ValueError, KeyError) as exc:
            self._send(400, {"error": str(exc)})
            return
        except NotReady as exc:
            self._send(503, {"error": str(exc)})
            return
        except Exception as exc:
            log.exception("handler failed")
            self._send(500, {"error": type(exc).__name__})
            return
        self._send(200, out)

    def _send(self, status: int, payload) -> None:
        data = payload if isinstance(payload, bytes) else json.dumps(payload, separators=(",", ":")).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def do_GET(self) -> None:
        self._dispatch("GET")

    def do_POST(self) -> None:
        self._dispatch("POST")


class _Server(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = True
    request_queue_size = 256


def _serve(handler: type, host: str, port: int) -> tuple[_Server, threading.Thread]:
    srv = _Server((host, port), handler)
    t = threading.Thread(target=srv.serve_forever, name=f"http-{port}", daemon=True)
    t.start()
    return srv, t


def _int(params: dict, name: str) -> int:
    try:
        return int(params[name])
    except (KeyError, ValueError) as exc:
        raise HttpError(400, f"missing or bad integer parameter {name!r}") from exc


def map_handler(server: MapServer) -> type:
    def query(params, body):
        return server.query_bytes(body)

    def smh(params, body):
        idx = params.get("index")
        try:
            return server.get_smh(int(idx) if idx is not None else None).to_json()
        except IndexError as exc:
            raise HttpError(404, "no such map head") from exc

    def consistency(params, body):
        return {"proof": [h.hex() for h in server.get_consistency(_int(params, "from"), _int(params, "to"))]}

    def head(params, body):
        return server.consistency_head().to_json()

    def cert(params, body):
        try:
            raw = server.get_cert(bytes.fromhex(params["_rest"]))
        except ValueError as exc:
            raise HttpError(400, "bad certificate hash") from exc
        if raw is None:
            raise HttpError(404, "unknown certificate")
        return {"certificate": b64(raw)}

    def health(params, body):
        s = server.serving()
        return {"status": "ok", "map_id": server.map_id, "smh_index": s.index,
                "certificates": len(server.state.certs), "quarantined": sorted(server.quarantined)}

    return type("MapHandler", (_Handler,), {
        "routes": {
            ("POST", "/v1/query"): query,
            ("GET", "/v1/smh"): smh,
            ("GET", "/v1/consistency"): consistency,
            ("GET", "/v1/consistency-head"): head,
            ("GET", "/healthz"): health,
        },
        "prefix_routes": {("GET", "/v1/cert/"): cert},
    })


def log_handler(stub: LogStub) -> type:
    def submit(params, body):
        doc = json.loads(body)
        return stub.submit(unb64(doc["certificate"]), bool(doc.get("precert", False))).to_json()

    def submit_revocation(params, body):
        doc = json.loads(body)
        return {"index": stub.submit_revocation(RevocationRecord.from_json(doc["revocation"]))}

    def entries(params, body):
        start, end = _int(params, "start"), _int(params, "end")
        if end - start > 10_000:
            end = start + 10_000
        try:
            return {"entries": [b64(e) for e in stub.get_entries(start, end)]}
        except IndexError as exc:
            raise HttpError(400, str(exc)) from exc

    def sth(params, body):
        return stub.get_sth().to_json()

    def inclusion(params, body):
        return {"path": [h.hex() for h in stub.get_inclusion(_int(params, "index"), _int(params, "size"))]}

    def consistency(params, body):
        return {"proof": [h.hex() for h in stub.get_consistency(_int(params, "first"), _int(params, "second"))]}

    def health(params, body):
        return {"status": "ok", "log_id": stub.log_id, "size": stub.tree.size}

    return type("LogHandler", (_Handler,), {
        "routes": {
            ("POST", "/v1/submit-cert"): submit,
            ("POST", "/v1/submit-revocation"): submit_revocation,
            ("GET", "/v1/get-entries"): entries,
            ("GET", "/v1/get-sth"): sth,
            ("GET", "/v1/get-inclusion"): inclusion,
            ("GET", "/v1/get-consistency"): consistency,
            ("GET", "/healthz"): health,
        },
        "prefix_routes": {},
    })


def serve_map(server: MapServer, host: str = "127.0.0.1", port: int = 0) -> tuple[_Server, threading.Thread]:
    return _serve(map_handler(server), host, port)


def serve_log(stub: LogStub, host: str = "127.0.0.1", port: int = 0) -> tuple[_Server, threading.Thread]:
    return _serve(log_handler(stub), host, port)


# -- clients -----------------------------------------------------------------


class HttpClient:
    """Keep-alive JSON client; one connection per calling thread."""

    def __init__(self, url: str, timeout: float = 10.0) -> None:
        parts = urlsplit(url if "://" in url else f"http://{url}")
        self.host = parts.hostname or "127.0.0.1"
        self.port = parts.port or 80
        self.base = parts.path.rstrip("/")
        self.timeout = timeout
        self._local = threading.local()

    def _conn(self) -> http.client.HTTPConnection:
        c = getattr(self._local, "conn", None)
        if c is None:
            c = http.client.HTTPConnection(self.host, self.port, timeout=self.timeout)
            c.connect()
            c.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._local.conn = c
        return c

    def request(self, method: str, path: str, body: bytes | None = None, params: dict | None = None) -> bytes:
        url = self.base + path + (f"?{urlencode(params)}" if params else "")
        for attempt in (0, 1):
            conn = self._conn()
            try:
                conn.request(method, url, body=body, headers={"Content-Type": "application/octet-stream"} if body else {})
                resp = conn.getresponse()
                data = resp.read()
                break
            except (ConnectionError, http.client.HTTPException, OSError):
                conn.close()
                self._local.conn = None
                if attempt:
                    raise
        if resp.status != 200:
            try:
                msg = json.loads(data).get("error", "")
            except ValueError:
                msg = data[:200].decode("utf-8", "replace")
            raise HttpError(resp.status, msg)
        return data

    def get_json(self, path: str, **params) -> dict:
        return json.loads(self.request("GET", path, params=params or None))

    def post_json(self, path: str, doc: dict) -> dict:
        return json.loads(self.request("POST", path, json.dumps(doc).encode()))


class HttpLogSource:
    def __init__(self, url: str, log_id: str) -> None:
        self.http = HttpClient(url)
        self.log_id = log_id

    def get_sth(self) -> STH:
        return STH.from_json(self.http.get_json("/v1/get-sth"))

    def get_entries(self, start: int, end: int) -> list[bytes]:
        return [unb64(e) for e in self.http.get_json("/v1/get-entries", start=start, end=end)["entries"]]

    def get_consistency(self, size_a: int, size_b: int) -> list[bytes]:
        return [bytes.fromhex(h) for h in self.http.get_json("/v1/get-consistency", first=size_a, second=size_b)["proof"]]

    def get_inclusion(self, index: int, size: int) -> list[bytes]:
        return [bytes.fromhex(h) for h in self.http.get_json("/v1/get-inclusion", index=index, size=size)["path"]]

    def submit(self, cert: GeoCert, precert: bool = False) -> SCT:
        return SCT.from_json(self.http.post_json("/v1/submit-cert", {"certificate": b64(cert.encode()), "precert": precert}))

    def submit_revocation(self, rec: RevocationRecord) -> int:
        return int(self.http.post_json("/v1/submit-revocation", {"revocation": rec.to_json()})["index"])


class HttpMapEndpoint:
    def __init__(self, url: str, map_id: str) -> None:
        self.http = HttpClient(url)
        self.map_id = map_id

    def query(self, body: bytes) -> bytes:
        return self.http.request("POST", "/v1/query", body)

    def get_smh(self, index: int | None = None) -> SignedMapHead:
        params = {"index": index} if index is not None else {}
        return SignedMapHead.from_json(self.http.get_json("/v1/smh", **params))

    def get_consistency(self, size_a: int, size_b: int) -> list[bytes]:
        return [bytes.fromhex(h) for h in self.http.get_json("/v1/consistency", **{"from": size_a, "to": size_b})["proof"]]

    def consistency_head(self) -> SignedConsistencyHead:
        return SignedConsistencyHead.from_json(self.http.get_json("/v1/consistency-head"))

    def get_cert(self, h: bytes) -> GeoCert:
        return GeoCert.decode(unb64(self.http.get_json(f"/v1/cert/{h.hex()}")["certificate"]))
