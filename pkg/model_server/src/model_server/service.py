"""HTTP JSON service for the embedding, parsing, and explanation models.

Routes (all POST unless noted):

    /embed/image   {"images": [base64 P6, ...]}  -> {"dim", "vectors"}
    /embed/text    {"tokens": [str, ...]}        -> {"dim", "vectors"}
    /parse         {"sentence": str}             -> {"tokens", "edges"}
    /explain       {"image": base64 P6, "grid_n": int} -> {"text"}
    /healthz (GET)                               -> {"status", "models"}

Vectors come back in request order, one per request item. Status codes:
400 for schema violations, 404 unknown route, 405 wrong method, 413
oversize body, 503 when no model backend is loaded, 500 on backend
failure. The service holds no state between requests; backend access is
serialized behind a lock so backends need not be thread-safe.
"""

import base64
import binascii
import http.server
import json
import threading

from . import ppm

MAX_BODY_BYTES = 8 * 1024 * 1024
MAX_BATCH_ITEMS = 256


class RequestError(Exception):
    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status
        self.message = message


def _need(payload: dict, key: str, kind, what: str):
    if not isinstance(payload, dict):
        raise RequestError(400, "request body must be a JSON object")
    val = payload.get(key)
    if not isinstance(val, kind) or isinstance(val, bool):
        raise RequestError(400, f"{key!r} must be {what}")
    return val


def _decode_image(b64):
    if not isinstance(b64, str):
        raise RequestError(400, "image entries must be base64 strings")
    try:
        raw = base64.b64decode(b64, validate=True)
    except (binascii.Error, ValueError) as exc:
        raise RequestError(400, f"invalid base64: {exc}") from exc
    try:
        return ppm.parse(raw)
    except ppm.PpmError as exc:
        raise RequestError(400, f"invalid P6 image: {exc}") from exc


class ModelService:
    """Route handling, independent of the socket layer.

    `handle` returns (status, body-dict) and never raises for request
    problems; constructing with backend=None models the not-yet-loaded
    state every route answers 503 for.
    """

    def __init__(self, backend=None, max_body: int = MAX_BODY_BYTES):
        self.backend = backend
        self.max_body = max_body
        self._lock = threading.Lock()

    # -- route bodies ---------------------------------------------------------

    def _embed_image(self, payload: dict) -> dict:
        items = _need(payload, "images", list, "a list of base64 P6 strings")
        if len(items) > MAX_BATCH_ITEMS:
            raise RequestError(413, f"batch exceeds {MAX_BATCH_ITEMS} items")
        images = [_decode_image(b) for b in items]
        with self._lock:
            vectors = self.backend.image_vectors(images)
        return {"dim": self.backend.image_dim, "vectors": [v.tolist() for v in vectors]}

    def _embed_text(self, payload: dict) -> dict:
        tokens = _need(payload, "tokens", list, "a list of strings")
        if len(tokens) > MAX_BATCH_ITEMS:
            raise RequestError(413, f"batch exceeds {MAX_BATCH_ITEMS} items")
        if not all(isinstance(t, str) for t in tokens):
            raise RequestError(400, "'tokens' must be a list of strings")
        with self._lock:
            vectors = self.backend.token_vectors(tokens)
        return {"dim": self.backend.text_dim, "vectors": [v.tolist() for v in vectors]}

    def _parse(self, payload: dict) -> dict:
        sentence = _need(payload, "sentence", str, "a string")
        with self._lock:
            tokens, edges = self.backend.parse(sentence)
        return {"tokens": tokens, "edges": [[int(a), int(b)] for a, b in edges]}

    def _explain(self, payload: dict) -> dict:
        pixels = _decode_image(_need(payload, "image", str, "a base64 P6 string"))
        grid_n = _need(payload, "grid_n", int, "an integer >= 1")
        if grid_n < 1:
            raise RequestError(400, "'grid_n' must be an integer >= 1")
        try:
            with self._lock:
                text = self.backend.explain(pixels, grid_n)
        except ValueError as exc:
            raise RequestError(400, str(exc)) from exc
        return {"text": text}

    _ROUTES = {
        "/embed/image": _embed_image,
        "/embed/text": _embed_text,
        "/parse": _parse,
        "/explain": _explain,
    }

    # -- entry points -----------------------------------------------------------

    def healthz(self) -> dict:
        if self.backend is None:
            return {"status": "unloaded", "models": None}
        return {"status": "ok", "models": self.backend.info()}

    def handle(self, route: str, body: bytes):
        """POST dispatch: returns (http status, response dict)."""
        handler = self._ROUTES.get(route)
        if handler is None:
            return 404, {"error": f"no such route: {route}"}
        if len(body) > self.max_body:
            return 413, {"error": f"request body exceeds {self.max_body} bytes"}
        if self.backend is None:
            return 503, {"error": "model backend not loaded"}
        try:
            payload = json.loads(body.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            return 400, {"error": f"body is not valid JSON: {exc}"}
        try:
            return 200, handler(self, payload)
        except RequestError as exc:
            return exc.status, {"error": exc.message}


class _Handler(http.server.BaseHTTPRequestHandler):
    service: ModelService  # set by make_server
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):
        pass  # quiet; the service is driven programmatically and in tests

    def _send(self, status: int, obj: dict) -> None:
        body = json.dumps(obj).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_GET(self):
        if self.path == "/healthz":
            health = self.service.healthz()
            self._send(200 if health["status"] == "ok" else 503, health)
        else:
            self._send(404, {"error": f"no such route: {self.path}"})

    def do_POST(self):
        length = self.headers.get("Content-Length")
        try:
            n = int(length)
        except (TypeError, ValueError):
            self._send(400, {"error": "Content-Length required"})
            return
        if n > self.service.max_body:
            # refuse before reading an oversize body off the wire
            self._send(413, {"error": f"request body exceeds {self.service.max_body} bytes"})
            self.close_connection = True
            return
        body = self.rfile.read(n)
        status, obj = self.service.handle(self.path, body)
        self._send(status, obj)


def make_server(service: ModelService, host: str = "127.0.0.1", port: int = 0):
    """ThreadingHTTPServer bound to (host, port); port 0 picks a free one."""
    handler = type("BoundHandler", (_Handler,), {"service": service})
    return http.server.ThreadingHTTPServer((host, port), handler)
