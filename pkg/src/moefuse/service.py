"""HTTP service: executes prompts against one loaded model and serves traces.

Endpoints (all JSON, UTF-8):

* ``GET  /healthz``     -> 200 "ok"
* ``GET  /api/model``   -> manifest echo
* ``GET  /api/experts`` -> expert names + utilization pooled over recent requests
* ``POST /api/trace``   -> body {prompt, max_new?, blocks?, projections?},
                           responds with a document per docs/trace.schema.json

The model is loaded once and never mutated; requests are handled on threads
and share it read-only. When ``static_dir`` is set the server also hosts the
visualizer's static files.
"""

from __future__ import annotations

import json
import threading
from collections import deque
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import numpy as np

from . import checkpoint as cp
from .model import MoeModel
from .stitch import BtsModel
from .tokenizer import ByteTokenizer
from .trace import aggregate, expert_utilization, trace_document

CONTENT_TYPES = {
    ".html": "text/html; charset=utf-8",
    ".js": "text/javascript; charset=utf-8",
    ".css": "text/css; charset=utf-8",
    ".json": "application/json",
    ".map": "application/json",
    ".svg": "image/svg+xml",
    ".png": "image/png",
    ".ico": "image/x-icon",
}


@dataclass
class ServeConfig:
    model_dir: str
    host: str = "127.0.0.1"
    port: int = 8080
    max_prompt_bytes: int = 4096
    request_timeout: float = 30.0
    static_dir: str | None = None
    utilization_window: int = 50

    def __post_init__(self):
        if self.max_prompt_bytes <= 0 or self.request_timeout <= 0:
            raise ValueError("limits must be positive")


class _State:
    """Shared across request threads: the immutable model plus a bounded
    window of recent per-request routing counts."""

    def __init__(self, config: ServeConfig):
        self.config = config
        ckpt = cp.load(config.model_dir)
        self.kind = ckpt.manifest.model_kind
        self.manifest = ckpt.manifest
        if self.kind == "bts":
            self.model = BtsModel.from_checkpoint(ckpt)
        else:
            self.model = MoeModel.from_checkpoint(ckpt)
        self.tokenizer = ByteTokenizer()
        self.lock = threading.Lock()
        self.recent = deque(maxlen=config.utilization_window)

    def record_utilization(self, trace) -> None:
        if not trace.decisions:
            return
        E = trace.num_experts
        counts = np.zeros(E)
        weights = np.zeros(E)
        for dec in trace.decisions:
            counts[dec.selected[0]] += 1
            weights += dec.full_weights(E)
        with self.lock:
            self.recent.append((counts, weights, len(trace.decisions)))

    def pooled_utilization(self) -> dict:
        with self.lock:
            snapshot = list(self.recent)
        names = list(self.manifest.moe.expert_names) if self.manifest.moe else []
        if not snapshot:
            return {"expert_names": names, "requests": 0,
                    "top1_fraction": [], "mean_weight": []}
        counts = sum(c for c, _, _ in snapshot)
        weights = sum(w for _, w, _ in snapshot)
        total = sum(n for _, _, n in snapshot)
        return {
            "expert_names": names,
            "requests": len(snapshot),
            "top1_fraction": [float(x) for x in counts / total],
            "mean_weight": [float(x) for x in weights / total],
        }


class _BadRequest(Exception):
    def __init__(self, status: int, message: str):
        self.status = status
        self.message = message


def _parse_trace_request(raw: bytes, max_prompt_bytes: int) -> dict:
    try:
        body = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise _BadRequest(400, "body must be a JSON object")
    if not isinstance(body, dict) or not isinstance(body.get("prompt"), str):
        raise _BadRequest(400, "body needs a string 'prompt' field")
    if len(body["prompt"].encode("utf-8")) > max_prompt_bytes:
        raise _BadRequest(413, f"prompt exceeds {max_prompt_bytes} bytes")
    max_new = body.get("max_new", 0)
    if not isinstance(max_new, int) or isinstance(max_new, bool) or max_new < 0:
        raise _BadRequest(400, "max_new must be a non-negative integer")
    for key in ("blocks", "projections"):
        val = body.get(key)
        if val is None:
            continue
        if not isinstance(val, list):
            raise _BadRequest(400, f"{key} must be a list")
        ok = all(isinstance(v, int) and not isinstance(v, bool) for v in val) \
            if key == "blocks" else all(isinstance(v, str) for v in val)
        if not ok:
            raise _BadRequest(400, f"{key} entries have the wrong type")
    return {"prompt": body["prompt"], "max_new": max_new,
            "blocks": body.get("blocks"), "projections": body.get("projections")}


def run_trace_request(state: _State, req: dict) -> dict:
    if state.kind == "bts":
        raise _BadRequest(422, "token routing traces need a traditional or btx model; "
                               "this checkpoint is bts")
    tok = state.tokenizer
    ids = tok.encode(req["prompt"])
    if req["max_new"] > 0:
        _, trace = state.model.generate(ids, req["max_new"], label_fn=tok.token_label)
    else:
        _, trace = state.model.forward(ids, label_fn=tok.token_label)
    filters = {"blocks": req["blocks"], "projections": req["projections"]}
    summaries = aggregate(trace, blocks=req["blocks"], projections=req["projections"])
    utilization = expert_utilization(trace) if trace.decisions else None
    state.record_utilization(trace)
    return trace_document(trace, summaries=summaries, utilization=utilization,
                          filters=filters)


def _make_handler(state: _State):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"
        timeout = state.config.request_timeout

        def log_message(self, fmt, *args):
            pass

        def _send(self, status: int, payload: bytes, content_type: str):
            self.send_response(status)
            self.send_header("Content-Type", content_type)
            self.send_header("Content-Length", str(len(payload)))
            self.end_headers()
            self.wfile.write(payload)

        def _send_json(self, status: int, doc) -> None:
            raw = json.dumps(doc, sort_keys=True).encode("utf-8")
            self._send(status, raw, "application/json")

        def _send_error_json(self, status: int, message: str) -> None:
            self._send_json(status, {"error": message})

        def _serve_static(self, path: str) -> None:
            root = Path(state.config.static_dir).resolve()
            rel = path.lstrip("/") or "index.html"
            target = (root / rel).resolve()
            if root not in target.parents and target != root:
                self._send_error_json(404, "not found")
                return
            if target.is_dir():
                target = target / "index.html"
            if not target.is_file():
                self._send_error_json(404, "not found")
                return
            ctype = CONTENT_TYPES.get(target.suffix, "application/octet-stream")
            self._send(200, target.read_bytes(), ctype)

        def do_GET(self):
            path = self.path.split("?", 1)[0]
            if path == "/healthz":
                self._send(200, b"ok", "text/plain; charset=utf-8")
            elif path == "/api/model":
                self._send_json(200, state.manifest.to_dict())
            elif path == "/api/experts":
                self._send_json(200, state.pooled_utilization())
            elif state.config.static_dir:
                self._serve_static(path)
            else:
                self._send_error_json(404, "not found")

        def do_POST(self):
            path = self.path.split("?", 1)[0]
            if path != "/api/trace":
                self._send_error_json(404, "not found")
                return
            length = int(self.headers.get("Content-Length", 0))
            if length > state.config.max_prompt_bytes + 65536:
                self._send_error_json(413, "request body too large")
                return
            raw = self.rfile.read(length)
            try:
                req = _parse_trace_request(raw, state.config.max_prompt_bytes)
                doc = run_trace_request(state, req)
            except _BadRequest as exc:
                self._send_error_json(exc.status, exc.message)
                return
            self._send_json(200, doc)

    return Handler


def create_server(config: ServeConfig) -> ThreadingHTTPServer:
    state = _State(config)
    server = ThreadingHTTPServer((config.host, config.port), _make_handler(state))
    server.daemon_threads = True
    return server


def serve(config: ServeConfig) -> None:
    server = create_server(config)
    host, port = server.server_address[:2]
    print(f"serving {config.model_dir} on http://{host}:{port}")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
