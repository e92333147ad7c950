"""Local HTTP render service consumed by the browser viewer.

JSON/HTTP contract (all angles in request/response JSON are degrees;
they are converted to radians internally):

    GET  /api/health         -> 200 "ok"
    GET  /api/model          -> architecture, settings length, slider ranges
    GET  /api/pointclouds    -> [{cloud_id, point_count}, ...]
    POST /api/pointclouds    -> body XYZ or PLY bytes; 400 on parse errors
    POST /api/render         -> image/png + X-Time-{Project,Zbuffer,Forward}-Ms

Render errors: 404 unknown cloud_id, 422 invalid settings, 409 resolution
not divisible by the model's 2^levels. Uploaded clouds are normalized once
and cached in memory only; the model is never mutated after load, so any
number of renders may run concurrently.
"""

from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import numpy as np

from . import fileio
from .network import SETTINGS_MATERIAL_LEN, Settings
from .projection import PointCloud, normalize_cloud
from .render import CameraSpec, Renderer

MAX_BODY_BYTES = 64 * 1024 * 1024

DEFAULT_LIGHT_AZ_DEG = 45.0
DEFAULT_LIGHT_EL_DEG = 35.0
DEFAULT_LIGHT_RADIUS = 4.0
DEFAULT_COLOR = (0.7, 0.7, 0.7)
DEFAULT_RESOLUTION = 256


class RequestError(Exception):
    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status
        self.message = message


@dataclass(frozen=True)
class StoredCloud:
    cloud_id: str
    normalized: PointCloud
    point_count: int
    scale: float
    centroid: tuple[float, float, float]


class CloudStore:
    """In-memory upload cache; uploads exclusive, reads on immutable entries."""

    def __init__(self):
        self._lock = threading.Lock()
        self._clouds: dict[str, StoredCloud] = {}
        self._counter = 0

    def add(self, cloud: PointCloud) -> StoredCloud:
        normalized, scale, centroid = normalize_cloud(cloud)
        with self._lock:
            self._counter += 1
            cloud_id = f"pc-{self._counter}"
            entry = StoredCloud(
                cloud_id=cloud_id,
                normalized=normalized,
                point_count=len(cloud),
                scale=scale,
                centroid=tuple(float(v) for v in centroid),
            )
            self._clouds[cloud_id] = entry
        return entry

    def get(self, cloud_id: str) -> StoredCloud | None:
        with self._lock:
            return self._clouds.get(cloud_id)

    def list(self) -> list[StoredCloud]:
        with self._lock:
            return list(self._clouds.values())


def _require_number(obj, key, lo=None, hi=None, default=None):
    value = obj.get(key, default)
    if value is None:
        raise RequestError(422, f"missing setting {key!r}")
    if not isinstance(value, (int, float)) or isinstance(value, bool) or not math.isfinite(value):
        raise RequestError(422, f"setting {key!r} must be a finite number")
    if lo is not None and value < lo or hi is not None and value > hi:
        raise RequestError(422, f"setting {key!r}={value} outside [{lo}, {hi}]")
    return float(value)


class RenderService:
    def __init__(self, renderer: Renderer, static_dir=None):
        self.renderer = renderer
        self.store = CloudStore()
        self.static_dir = Path(static_dir).resolve() if static_dir else None

    # -- request parsing ----------------------------------------------------

    def parse_settings(self, body: dict) -> Settings:
        raw = body.get("settings", {})
        if not isinstance(raw, dict):
            raise RequestError(422, "settings must be an object")
        color_raw = raw.get("color", list(DEFAULT_COLOR))
        if not isinstance(color_raw, (list, tuple)) or len(color_raw) != 3:
            raise RequestError(422, "settings.color must be [r, g, b]")
        color = tuple(_require_number({"c": c}, "c", 0.0, 1.0) for c in color_raw)

        light_raw = raw.get("light", {})
        if not isinstance(light_raw, dict):
            raise RequestError(422, "settings.light must be an object")
        az = _require_number(light_raw, "az", -360.0, 360.0, DEFAULT_LIGHT_AZ_DEG)
        el = _require_number(light_raw, "el", -89.0, 89.0, DEFAULT_LIGHT_EL_DEG)
        radius = _require_number(light_raw, "radius", 0.1, 100.0, DEFAULT_LIGHT_RADIUS)

        expects_material = self.renderer.model.config.settings_length == SETTINGS_MATERIAL_LEN
        material_raw = raw.get("material")
        if expects_material:
            if material_raw is None:
                raise RequestError(422, "model expects material settings (metallic, roughness)")
            if not isinstance(material_raw, dict):
                raise RequestError(422, "settings.material must be an object")
            material = (
                _require_number(material_raw, "metallic", 0.0, 1.0),
                _require_number(material_raw, "roughness", 0.0, 1.0),
            )
        else:
            if material_raw is not None:
                raise RequestError(422, "model was trained without material control")
            material = None
        return Settings(
            color=color,
            light=(math.radians(az), math.radians(el), radius),
            material=material,
        )

    def parse_camera(self, body: dict) -> CameraSpec:
        raw = body.get("camera", {})
        if not isinstance(raw, dict):
            raise RequestError(422, "camera must be an object")
        yaw = _require_number(raw, "yaw", -100000.0, 100000.0, 0.0)
        pitch = raw.get("pitch")
        distance = raw.get("distance")
        if pitch is not None:
            pitch = math.radians(_require_number(raw, "pitch", -89.0, 89.0))
        if distance is not None:
            distance = _require_number(raw, "distance", 0.5, 100.0)
        return CameraSpec(yaw=math.radians(yaw), pitch=pitch, distance=distance)

    def handle_render(self, body: dict) -> tuple[bytes, dict]:
        if ("cloud_id" in body) == ("points" in body):
            raise RequestError(422, "provide exactly one of cloud_id or points")
        if "cloud_id" in body:
            entry = self.store.get(str(body["cloud_id"]))
            if entry is None:
                raise RequestError(404, f"unknown cloud_id {body['cloud_id']!r}")
            normalized = entry.normalized
        else:
            pts = body["points"]
            try:
                cloud = PointCloud(np.asarray(pts, dtype=np.float64))
            except (ValueError, TypeError) as exc:
                raise RequestError(422, f"invalid inline points: {exc}") from None
            normalized, _, _ = normalize_cloud(cloud)

        resolution = body.get("resolution", DEFAULT_RESOLUTION)
        if not isinstance(resolution, int) or isinstance(resolution, bool) or resolution < 1:
            raise RequestError(422, "resolution must be a positive integer")
        div = self.renderer.model.config.size_divisor
        if resolution % div:
            raise RequestError(409, f"resolution {resolution} not divisible by 2^levels = {div}")

        settings = self.parse_settings(body)
        camera = self.parse_camera(body)
        rgba, timings = self.renderer.render(
            normalized, settings, resolution, camera,
            normalization=(normalized, 1.0, np.zeros(3)),
        )
        headers = {
            "X-Time-Project-Ms": f"{timings.project_ms:.3f}",
            "X-Time-Zbuffer-Ms": f"{timings.zbuffer_ms:.3f}",
            "X-Time-Forward-Ms": f"{timings.forward_ms:.3f}",
        }
        return fileio.encode_png_rgba(rgba), headers

    def model_info(self) -> dict:
        cfg = self.renderer.model.config
        return {
            "config": cfg.to_dict(),
            "settings_length": cfg.settings_length,
            "resolution_divisor": cfg.size_divisor,
            "default_resolution": DEFAULT_RESOLUTION,
            "angles": "degrees",
            "ranges": {
                "color": [0.0, 1.0],
                "light_az": [-360.0, 360.0],
                "light_el": [-89.0, 89.0],
                "light_radius": [0.1, 100.0],
                "metallic": [0.0, 1.0],
                "roughness": [0.0, 1.0],
                "camera_pitch": [-89.0, 89.0],
                "camera_distance": [0.5, 100.0],
            },
            "zbuffer": {
                "alpha": self.renderer.zparams.alpha,
                "beta": self.renderer.zparams.beta,
                "window": self.renderer.zparams.window,
            },
        }

    def make_server(self, host: str = "127.0.0.1", port: int = 8000) -> ThreadingHTTPServer:
        service = self

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def log_message(self, fmt, *args):  # quiet by default
                pass

            def _send(self, status: int, payload: bytes, content_type: str, extra: dict | None = None):
                self.send_response(status)
                self.send_header("Content-Type", content_type)
                self.send_header("Content-Length", str(len(payload)))
                self.send_header("Access-Control-Allow-Origin", "*")
                for key, value in (extra or {}).items():
                    self.send_header(key, value)
                self.end_headers()
                self.wfile.write(payload)

            def _send_json(self, status: int, obj, extra: dict | None = None):
                self._send(status, json.dumps(obj).encode("utf-8"), "application/json", extra)

            def _body(self) -> bytes:
                length = int(self.headers.get("Content-Length", 0))
                if length > MAX_BODY_BYTES:
                    raise RequestError(413, "request body too large")
                return self.rfile.read(length)

            def do_OPTIONS(self):
                self.send_response(204)
                self.send_header("Access-Control-Allow-Origin", "*")
                self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
                self.send_header("Access-Control-Allow-Headers", "Content-Type")
                self.send_header("Content-Length", "0")
                self.end_headers()

            def do_GET(self):
                try:
                    if self.path == "/api/health":
                        self._send(200, b"ok", "text/plain")
                    elif self.path == "/api/model":
                        self._send_json(200, service.model_info())
                    elif self.path == "/api/pointclouds":
                        listing = [
                            {"cloud_id": e.cloud_id, "point_count": e.point_count}
                            for e in service.store.list()
                        ]
                        self._send_json(200, listing)
                    else:
                        self._serve_static()
                except RequestError as exc:
                    self._send_json(exc.status, {"error": exc.message})
                except BrokenPipeError:
                    pass

            def do_POST(self):
                try:
                    if self.path == "/api/pointclouds":
                        try:
                            cloud = fileio.parse_point_cloud(self._body())
                        except fileio.PointCloudParseError as exc:
                            raise RequestError(400, str(exc)) from None
                        entry = service.store.add(cloud)
                        self._send_json(
                            200,
                            {
                                "cloud_id": entry.cloud_id,
                                "point_count": entry.point_count,
                                "normalization": {
                                    "scale": entry.scale,
                                    "centroid": list(entry.centroid),
                                },
                            },
                        )
                    elif self.path == "/api/render":
                        try:
                            body = json.loads(self._body().decode("utf-8"))
                        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                            raise RequestError(400, f"malformed JSON body: {exc}") from None
                        if not isinstance(body, dict):
                            raise RequestError(400, "request body must be a JSON object")
                        png, extra = service.handle_render(body)
                        self._send(200, png, "image/png", extra)
                    else:
                        self._send_json(404, {"error": f"no such endpoint {self.path}"})
                except RequestError as exc:
                    self._send_json(exc.status, {"error": exc.message})
                except BrokenPipeError:
                    pass

            def _serve_static(self):
                if service.static_dir is None:
                    self._send_json(404, {"error": f"no such endpoint {self.path}"})
                    return
                rel = self.path.lstrip("/") or "index.html"
                target = (service.static_dir / rel).resolve()
                if not str(target).startswith(str(service.static_dir)) or not target.is_file():
                    self._send_json(404, {"error": f"not found: {self.path}"})
                    return
                types = {
                    ".html": "text/html", ".js": "text/javascript",
                    ".css": "text/css", ".png": "image/png", ".ico": "image/x-icon",
                }
                self._send(200, target.read_bytes(), types.get(target.suffix, "application/octet-stream"))

        return ThreadingHTTPServer((host, port), Handler)


def serve_forever(renderer: Renderer, host: str, port: int, static_dir=None, announce=print):
    server = RenderService(renderer, static_dir=static_dir).make_server(host, port)
    actual_port = server.server_address[1]
    announce(f"listening on http://{host}:{actual_port}")
    try:
        server.serve_forever()
    finally:
        server.server_close()
