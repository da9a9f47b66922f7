"""Mini MLaaS prediction endpoint: label-only responses over JSON.

:class:`ServingApp` holds the request/response contract. It is exposed
over HTTP by :func:`serve` and in-process by :class:`InProcessEndpoint`;
the verifier treats both the same.
"""
from __future__ import annotations

import json
import logging
import threading
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from .fingerprint.inductive import construct_inductive_randomized
from .fingerprint.transductive import generate_randomized
from .gcn import Model, predict_all
from .graph import Graph, GraphFormatError, graph_from_dict, normalize_adjacency

log = logging.getLogger(__name__)

MODES = ("transductive", "inductive")


class ProtocolError(ValueError):
    """A request that violates the wire contract (answered with HTTP 400)."""


class TransportError(RuntimeError):
    """The endpoint could not be reached or answered garbage."""


@dataclass
class AdaptiveConfig:
    """Attacker that guesses ``m_A`` fingerprints and answers those honestly.

    Transductive guesses come from the verifier's sample-then-score strategy
    with sample size ``m_A``; inductive guesses are fingerprint graphs built
    with the verifier's randomized-target construction on ``shadow``.
    """

    m_A: int
    honest_model: Model
    attack_model: Model
    seed: int = 0
    method: str = "F"
    shadow: Graph | None = None
    budget: int = 5


@dataclass
class ServingConfig:
    mode: str
    model: Model
    graph: Graph | None = None
    attacker: object = None
    host: str = "127.0.0.1"
    port: int = 0
    strict: bool = False
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.mode == "transductive" and self.graph is None:
            raise ValueError("transductive serving needs a hosted graph")
        if self.mode == "inductive" and self.graph is not None:
            raise ValueError("inductive serving must not host a graph")


def _canonical_query_key(g: Graph, node: int) -> tuple:
    return (g.content_hash(), int(node))


class ServingApp:
    """Immutable prediction service; one model snapshot per instance."""

    def __init__(self, cfg: ServingConfig):
        self.cfg = cfg
        self.mode = cfg.mode
        model = cfg.model
        self.honest = model
        self.attack = None
        self.honest_set: frozenset = frozenset()
        att = cfg.attacker
        if isinstance(att, Model):
            model = att
        elif isinstance(att, AdaptiveConfig):
            self.honest = att.honest_model
            self.attack = att.attack_model
            self.honest_set = self._build_honest_set(att)
        elif att is not None:
            raise ValueError(f"unsupported attacker {att!r}")
        self.model = model
        for mdl in (self.model, self.attack):
            if mdl is not None and cfg.graph is not None and cfg.graph.num_features != mdl.input_dim:
                raise ValueError("checkpoint and hosted graph dimensions disagree")
        self._hosted = {}
        if self.mode == "transductive":
            g = cfg.graph
            adj = normalize_adjacency(g)
            if self.attack is None:
                self._hosted["served"] = predict_all(self.model, adj, g.X_sparse)
            else:
                self._hosted["honest"] = predict_all(self.honest, adj, g.X_sparse)
                self._hosted["attack"] = predict_all(self.attack, adj, g.X_sparse)
        self.model_hash = (self.honest if self.attack is not None else self.model).hash()

    def _build_honest_set(self, att: AdaptiveConfig) -> frozenset:
        if att.m_A <= 0:
            return frozenset()
        if self.mode == "transductive":
            g = self.cfg.graph
            pool = np.arange(g.num_nodes)
            m_A = min(att.m_A, g.num_nodes)
            if att.method == "random" or m_A == g.num_nodes:
                rng = np.random.default_rng(att.seed)
                return frozenset(int(v) for v in rng.choice(pool, size=m_A, replace=False))
            fps = generate_randomized(att.honest_model, g, pool, sample_size=m_A, k=m_A,
                                      seed=att.seed, method=att.method)
            return frozenset(f.node_id for f in fps)
        if att.shadow is None:
            raise ValueError("inductive adaptive attacker needs a shadow graph")
        k = min(att.m_A, att.shadow.num_nodes)
        guess = construct_inductive_randomized(att.honest_model, att.shadow, k, att.budget,
                                               seed=att.seed, method=att.method,
                                               sample_size=k)
        return frozenset(_canonical_query_key(guess.graph, v) for v in guess.nodes)

    def health(self) -> dict:
        out = {"mode": self.mode}
        if not self.cfg.strict:
            out["model_hash"] = self.model_hash
        return out

    def _label_hosted(self, node: int) -> int:
        if self.attack is None:
            return int(self._hosted["served"][node])
        which = "honest" if node in self.honest_set else "attack"
        return int(self._hosted[which][node])

    def _labels_graph(self, g: Graph, nodes) -> list:
        adj = normalize_adjacency(g)
        if self.attack is None:
            pred = predict_all(self.model, adj, g.X_sparse)
            return [int(pred[v]) for v in nodes]
        h = g.content_hash()
        honest = predict_all(self.honest, adj, g.X_sparse)
        attack = predict_all(self.attack, adj, g.X_sparse)
        return [int(honest[v] if (h, v) in self.honest_set else attack[v]) for v in nodes]

    def predict(self, body) -> dict:
        if not isinstance(body, dict):
            raise ProtocolError("body must be a JSON object")
        if self.mode == "transductive":
            node = body.get("node")
            if set(body) != {"node"} or not isinstance(node, int) or isinstance(node, bool):
                raise ProtocolError('expected {"node": int}')
            if not 0 <= node < self.cfg.graph.num_nodes:
                raise ProtocolError(f"node {node} out of range")
            return {"label": self._label_hosted(node)}
        if set(body) != {"graph", "nodes"}:
            raise ProtocolError('expected {"graph": ..., "nodes": [...]}')
        nodes = body["nodes"]
        if not isinstance(nodes, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in nodes):
            raise ProtocolError("nodes must be a list of ints")
        try:
            g = graph_from_dict(body["graph"], symmetrize=False)
        except (GraphFormatError, TypeError, AttributeError) as exc:
            raise ProtocolError(f"bad graph: {exc}") from exc
        if g.num_features != self.model.input_dim:
            raise ProtocolError("graph feature dimension does not match the model")
        if any(not 0 <= v < g.num_nodes for v in nodes):
            raise ProtocolError("node out of range")
        return {"labels": self._labels_graph(g, nodes)}

    def handle(self, method: str, path: str, raw: bytes = b"") -> tuple:
        """Dispatch one request; returns ``(status, payload)``. Never raises."""
        try:
            if method == "GET" and path == "/healthz":
                return 200, self.health()
            if method == "POST" and path == "/predict":
                try:
                    body = json.loads(raw.decode("utf-8"))
                except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                    raise ProtocolError(f"invalid JSON: {exc}") from exc
                return 200, self.predict(body)
            return 404, {"error": f"no route {method} {path}"}
        except ProtocolError as exc:
            return 400, {"error": str(exc)}
        except Exception as exc:  # noqa: BLE001 - the endpoint must survive any request
            log.exception("request failed")
            return 500, {"error": f"internal error: {exc}"}


class InProcessEndpoint:
    """Same contract as the HTTP endpoint, without sockets."""

    transport = "inproc"

    def __init__(self, app: ServingApp):
        self.app = app

    def request(self, method: str, path: str, body=None) -> dict:
        raw = b"" if body is None else json.dumps(body).encode()
        status, payload = self.app.handle(method, path, raw)
        payload = json.loads(json.dumps(payload))
        if status != 200:
            raise TransportError(f"HTTP {status}: {payload.get('error')}")
        return payload


class HttpEndpoint:
    transport = "http"

    def __init__(self, url: str, timeout: float = 10.0):
        self.url = url.rstrip("/")
        self.timeout = timeout

    def request(self, method: str, path: str, body=None) -> dict:
        data = None if body is None else json.dumps(body).encode()
        req = urllib.request.Request(self.url + path, data=data, method=method,
                                     headers={"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                return json.loads(resp.read().decode())
        except urllib.error.HTTPError as exc:
            raise TransportError(f"HTTP {exc.code}: {exc.read().decode(errors='replace')}") from exc
        except (urllib.error.URLError, OSError, json.JSONDecodeError) as exc:
            raise TransportError(str(exc)) from exc


def _handler_for(app: ServingApp):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def _send(self, status, payload):
            raw = json.dumps(payload).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(raw)))
            self.end_headers()
            self.wfile.write(raw)

        def do_GET(self):
            self._send(*app.handle("GET", self.path))

        def do_POST(self):
            try:
                length = int(self.headers.get("Content-Length") or 0)
            except ValueError:
                length = 0
            raw = self.rfile.read(length) if length > 0 else b""
            self._send(*app.handle("POST", self.path, raw))

        def log_message(self, fmt, *args):
            log.debug("%s - %s", self.address_string(), fmt % args)

    return Handler


class RunningServer:
    def __init__(self, app: ServingApp, httpd: ThreadingHTTPServer, thread: threading.Thread):
        self.app = app
        self.httpd = httpd
        self.thread = thread

    @property
    def url(self) -> str:
        host, port = self.httpd.server_address[:2]
        return f"http://{host}:{port}"

    def shutdown(self):
        self.httpd.shutdown()
        self.httpd.server_close()
        self.thread.join(timeout=5)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.shutdown()


def serve(cfg: ServingConfig, background: bool = True) -> RunningServer:
    """Start the HTTP endpoint. The model snapshot is loaded once, here."""
    app = ServingApp(cfg)
    httpd = ThreadingHTTPServer((cfg.host, cfg.port), _handler_for(app))
    httpd.daemon_threads = True
    thread = threading.Thread(target=httpd.serve_forever, daemon=True)
    server = RunningServer(app, httpd, thread)
    if background:
        thread.start()
    else:
        try:
            httpd.serve_forever()
        finally:
            httpd.server_close()
    return server


def endpoint_for(cfg: ServingConfig) -> InProcessEndpoint:
    return InProcessEndpoint(ServingApp(cfg))
