"""HTTP inference service with per-image feature caching.

Uploads are content-addressed (sha256 of the PNG bytes), so retries are
idempotent and repeated uploads share one cache entry. The expensive
pyramid/encoder/aggregation half runs once per image; every click after
that only runs the head. Sessions are pinned while a query uses them, so
LRU eviction can never pull a session out from under an in-flight request.

JSON over HTTP; score maps and masks ride base64-encoded PNGs, with a raw
mask endpoint for direct downloads. Endpoints:

    POST /images                    body: raw PNG -> {image_id, ...}
    POST /images/{id}/query         body: {x, y, level?, threshold?}
    GET  /images/{id}/mask?x=&y=&level=&threshold=   -> image/png
    GET  /images/{id}/debug         -> cached feature shapes
    GET  /healthz                   -> {status, model_checksum, cache_entries}
    GET  /ui/...                    -> static frontend, when configured
"""

from __future__ import annotations

import base64
import hashlib
import json
import mimetypes
import os
import sys
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import parse_qs, urlparse

import numpy as np

from matselect import core
from matselect import head as hd
from matselect.core import QueryPoint


@dataclass
class ServiceConfig:
    checkpoint: str = ""
    host: str = "127.0.0.1"
    port: int = 8765
    cache_entries: int = 16
    max_pixels: int = 4_000_000
    feature_dir: str | None = None  # external-backend checkpoints only
    ui_dir: str | None = None
    log_path: str | None = None  # None: stderr

    @classmethod
    def load(cls, toml_path=None, env=None) -> "ServiceConfig":
        """TOML file first, then MATSELECT_* environment overrides."""
        import tomli

        values: dict = {}
        if toml_path is not None:
            with open(toml_path, "rb") as f:
                raw = tomli.load(f)
            for key, value in raw.items():
                if key not in cls.__dataclass_fields__:
                    raise ValueError(f"unknown service config key {key!r}")
                values[key] = value
        env = os.environ if env is None else env
        for key in cls.__dataclass_fields__:
            env_key = f"MATSELECT_{key.upper()}"
            if env_key in env:
                raw_value = env[env_key]
                kind = cls.__dataclass_fields__[key].type
                values[key] = int(raw_value) if kind == "int" else raw_value
        return cls(**values)


class ImageSession:
    """Immutable cached state for one uploaded image."""

    def __init__(self, image_id: str, image: np.ndarray, features: list):
        self.image_id = image_id
        self.image = image
        self.features = features
        self.created_at = time.time()
        self.last_used = self.created_at
        self.pins = 0


class SessionCache:
    """Bounded LRU with single-writer insertion and pin-protected eviction."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self._entries: OrderedDict[str, ImageSession] = OrderedDict()
        self._inflight: dict[str, threading.Event] = {}
        self._lock = threading.Lock()

    def __len__(self):
        with self._lock:
            return len(self._entries)

    def get_or_compute(self, key: str, compute) -> ImageSession:
        """Return the pinned session for ``key``; the first caller computes,
        concurrent callers wait for it. Call ``release`` when done."""
        while True:
            with self._lock:
                session = self._entries.get(key)
                if session is not None:
                    self._entries.move_to_end(key)
                    session.pins += 1
                    session.last_used = time.time()
                    return session
                event = self._inflight.get(key)
                if event is None:
                    self._inflight[key] = threading.Event()
                    break
            event.wait()
        try:
            session = compute()
        except BaseException:
            with self._lock:
                self._inflight.pop(key).set()
            raise
        with self._lock:
            session.pins += 1
            self._entries[key] = session
            self._evict_locked()
            self._inflight.pop(key).set()
        return session

    def acquire(self, key: str) -> ImageSession | None:
        """Pin and return an existing session, or None."""
        with self._lock:
            session = self._entries.get(key)
            if session is not None:
                self._entries.move_to_end(key)
                session.pins += 1
                session.last_used = time.time()
            return session

    def release(self, session: ImageSession) -> None:
        with self._lock:
            session.pins -= 1

    def _evict_locked(self) -> None:
        # never drop pinned sessions; capacity may be exceeded while all pinned
        for key in list(self._entries):
            if len(self._entries) <= self.capacity:
                return
            if self._entries[key].pins <= 0:
                del self._entries[key]


class HttpError(Exception):
    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status
        self.message = message


class SelectionService:
    """Request-level logic, independent of the HTTP plumbing."""

    def __init__(self, model: hd.SelectionModel, config: ServiceConfig,
                 model_checksum: str = ""):
        self.model = model
        self.config = config
        self.model_checksum = model_checksum
        self.cache = SessionCache(config.cache_entries)

    @classmethod
    def from_config(cls, config: ServiceConfig) -> "SelectionService":
        model = hd.load_checkpoint(config.checkpoint, feature_dir=config.feature_dir)
        checksum = hd.checkpoint_manifest_hash(config.checkpoint)
        return cls(model, config, model_checksum=checksum)

    # -- handlers -------------------------------------------------------------

    def upload(self, body: bytes) -> dict:
        if not body:
            raise HttpError(400, "empty body")
        image_id = hashlib.sha256(body).hexdigest()

        def compute() -> ImageSession:
            try:
                image = core.decode_image_bytes(body)
            except Exception as exc:
                raise HttpError(400, f"undecodable PNG: {exc}") from exc
            if image.shape[0] * image.shape[1] > self.config.max_pixels:
                raise HttpError(413, f"image exceeds {self.config.max_pixels} pixels")
            return ImageSession(image_id, image, self.model.compute_features(image))

        session = self.cache.get_or_compute(image_id, compute)
        try:
            h, w = session.image.shape[:2]
            return {"image_id": image_id, "width": w, "height": h,
                    "levels": list(self.model.head_config.levels_out)}
        finally:
            self.cache.release(session)

    def _session(self, image_id: str) -> ImageSession:
        session = self.cache.acquire(image_id)
        if session is None:
            raise HttpError(404, f"unknown image_id {image_id}")
        return session

    def query(self, image_id: str, payload: dict) -> dict:
        level = payload.get("level", "texture")
        threshold = payload.get("threshold", 0.5)
        session = self._session(image_id)
        try:
            h, w = session.image.shape[:2]
            q = self._parse_query(payload, w, h)
            if level not in self.model.head_config.levels_out:
                raise HttpError(422, f"unknown level {level!r}")
            if not (isinstance(threshold, (int, float)) and 0.0 < threshold < 1.0):
                raise HttpError(422, f"threshold must lie in (0, 1), got {threshold}")
            scores = self.model.score_maps(session.image, q, features=session.features)
            channel = self.model.head_config.channel(level)
            mask = core.threshold_mask(scores[:, :, channel], float(threshold))
            response = {
                "image_id": image_id, "x": q.x, "y": q.y,
                "level": level, "threshold": float(threshold),
                "mask_png": base64.b64encode(core.encode_mask_bytes(mask)).decode(),
                "stats": {"mask_area_fraction": float(mask.mean()),
                          "mean_score": float(scores[:, :, channel].mean())},
            }
            for name in self.model.head_config.levels_out:
                c = self.model.head_config.channel(name)
                response[f"scores_{name}_png"] = base64.b64encode(
                    core.encode_scores_bytes(scores[:, :, c])).decode()
            return response
        finally:
            self.cache.release(session)

    def mask_png(self, image_id: str, params: dict) -> bytes:
        payload = {"x": params.get("x"), "y": params.get("y"),
                   "level": params.get("level", "texture"),
                   "threshold": float(params.get("threshold", 0.5))}
        try:
            payload["x"] = int(payload["x"])
            payload["y"] = int(payload["y"])
        except (TypeError, ValueError):
            raise HttpError(422, "x and y must be integers")
        result = self.query(image_id, payload)
        return base64.b64decode(result["mask_png"])

    def debug(self, image_id: str) -> dict:
        session = self._session(image_id)
        try:
            return {"image_id": image_id,
                    "original": list(session.image.shape),
                    "aggregated_shapes": [list(f.shape) for f in session.features.f_aggs]}
        finally:
            self.cache.release(session)

    def healthz(self) -> dict:
        return {"status": "ok", "model_checksum": self.model_checksum,
                "cache_entries": len(self.cache)}

    @staticmethod
    def _parse_query(payload: dict, width: int, height: int) -> QueryPoint:
        x, y = payload.get("x"), payload.get("y")
        if not isinstance(x, int) or not isinstance(y, int) or isinstance(x, bool):
            raise HttpError(422, "x and y must be integers")
        if not (0 <= x < width and 0 <= y < height):
            raise HttpError(422, f"({x}, {y}) outside image {width}x{height}")
        return QueryPoint(x, y, width, height)


class _Handler(BaseHTTPRequestHandler):
    service: SelectionService = None  # overridden per server
    log_file = None

    # -- plumbing -------------------------------------------------------------

    def log_message(self, fmt, *args):  # default stderr chatter replaced below
        pass

    def _log(self, status: int, started: float):
        line = json.dumps({"ts": round(time.time(), 3), "method": self.command,
                           "path": self.path, "status": status,
                           "ms": round((time.time() - started) * 1000, 2)})
        target = self.log_file or sys.stderr
        print(line, file=target, flush=True)

    def _send_json(self, status: int, payload: dict, started: float):
        body = json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)
        self._log(status, started)

    def _send_bytes(self, status: int, body: bytes, content_type: str, started: float):
        self.send_response(status)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)
        self._log(status, started)

    def _body(self) -> bytes:
        length = int(self.headers.get("Content-Length") or 0)
        return self.rfile.read(length) if length else b""

    def _route(self, method: str):
        started = time.time()
        url = urlparse(self.path)
        parts = [p for p in url.path.split("/") if p]
        try:
            if method == "POST" and parts == ["images"]:
                return self._send_json(200, self.service.upload(self._body()), started)
            if method == "POST" and len(parts) == 3 and parts[0] == "images" and parts[2] == "query":
                try:
                    payload = json.loads(self._body() or b"{}")
                except json.JSONDecodeError:
                    raise HttpError(400, "invalid JSON body")
                return self._send_json(200, self.service.query(parts[1], payload), started)
            if method == "GET" and parts == ["healthz"]:
                return self._send_json(200, self.service.healthz(), started)
            if method == "GET" and len(parts) == 3 and parts[0] == "images" and parts[2] == "mask":
                params = {k: v[0] for k, v in parse_qs(url.query).items()}
                body = self.service.mask_png(parts[1], params)
                return self._send_bytes(200, body, "image/png", started)
            if method == "GET" and len(parts) == 3 and parts[0] == "images" and parts[2] == "debug":
                return self._send_json(200, self.service.debug(parts[1]), started)
            if method == "GET" and parts[:1] == ["ui"]:
                return self._serve_static(parts[1:], started)
            raise HttpError(404, f"no route for {method} {url.path}")
        except HttpError as exc:
            return self._send_json(exc.status, {"error": exc.message}, started)
        except Exception as exc:  # pragma: no cover - defensive
            return self._send_json(500, {"error": f"internal error: {exc}"}, started)

    def _serve_static(self, parts: list[str], started: float):
        ui_dir = self.service.config.ui_dir
        if not ui_dir:
            raise HttpError(404, "no UI bundle configured (set ui_dir)")
        root = Path(ui_dir).resolve()
        target = (root / Path(*parts)) if parts else root / "index.html"
        target = target.resolve()
        if root not in target.parents and target != root:
            raise HttpError(404, "not found")
        if target.is_dir():
            target = target / "index.html"
        if not target.is_file():
            raise HttpError(404, f"no such asset {'/'.join(parts)}")
        ctype = mimetypes.guess_type(str(target))[0] or "application/octet-stream"
        self._send_bytes(200, target.read_bytes(), ctype, started)

    def do_GET(self):
        self._route("GET")

    def do_POST(self):
        self._route("POST")


def make_server(service: SelectionService) -> ThreadingHTTPServer:
    handler = type("BoundHandler", (_Handler,), {"service": service})
    if service.config.log_path:
        handler.log_file = open(service.config.log_path, "a")
    return ThreadingHTTPServer((service.config.host, service.config.port), handler)


def serve(config: ServiceConfig) -> None:
    """Blocking entry point used by the CLI."""
    service = SelectionService.from_config(config)
    server = make_server(service)
    host, port = server.server_address[:2]
    print(f"serving on http://{host}:{port} (checkpoint {config.checkpoint})",
          file=sys.stderr, flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
