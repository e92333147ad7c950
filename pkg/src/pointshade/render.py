"""End-to-end preview pipeline: normalize, project, splat, network forward.

One place owns the stage timing so the CLI breakdown, the benchmark CSV
and the service response headers all report the same three numbers:
project (normalization + pinhole projection), zbuffer (splatting), and
forward (network inference).
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import fileio
from .network import RenderModel, Settings
from .projection import (
    DEFAULT_CAMERA_DISTANCE,
    DEFAULT_CAMERA_PITCH,
    DEFAULT_FOCAL_FACTOR,
    PointCloud,
    ZBufferParams,
    make_orbit_camera,
    normalize_cloud,
    project,
    rasterize,
)


@dataclass(frozen=True)
class RenderTimings:
    project_ms: float
    zbuffer_ms: float
    forward_ms: float

    @property
    def total_ms(self) -> float:
        return self.project_ms + self.zbuffer_ms + self.forward_ms


@dataclass(frozen=True)
class CameraSpec:
    """Orbit parameters in radians/world units around the normalized cloud."""

    yaw: float = 0.0
    pitch: float | None = None
    distance: float | None = None


class Renderer:
    """Immutable model plus the projection constants it was trained with."""

    def __init__(self, model: RenderModel, zparams: ZBufferParams | None = None,
                 camera: dict | None = None):
        self.model = model
        self.zparams = zparams or ZBufferParams()
        camera = camera or {}
        self.pitch = float(camera.get("pitch", DEFAULT_CAMERA_PITCH))
        self.distance = float(camera.get("distance", DEFAULT_CAMERA_DISTANCE))
        self.focal_factor = float(camera.get("focal_factor", DEFAULT_FOCAL_FACTOR))

    @classmethod
    def from_bundle(cls, bundle: fileio.ModelBundle) -> "Renderer":
        return cls(fileio.model_from_bundle(bundle), bundle.zparams, bundle.camera)

    @classmethod
    def from_file(cls, path) -> "Renderer":
        return cls.from_bundle(fileio.load_model(path))

    def render(
        self,
        cloud: PointCloud,
        settings: Settings,
        resolution: int,
        camera: CameraSpec = CameraSpec(),
        backend: str = "auto",
        normalization: tuple[PointCloud, float, np.ndarray] | None = None,
    ) -> tuple[np.ndarray, RenderTimings]:
        """Render a cloud to (4, H, W) RGBA with per-stage wall times.

        ``normalization`` short-circuits normalize_cloud for callers that
        cache uploaded clouds already normalized.
        """
        div = self.model.config.size_divisor
        if resolution < div or resolution % div:
            raise ValueError(f"resolution {resolution} must be a positive multiple of {div}")

        t0 = time.perf_counter()
        if normalization is None:
            normalized, _, _ = normalize_cloud(cloud)
        else:
            normalized = normalization[0]
        cam = make_orbit_camera(
            resolution,
            yaw=camera.yaw,
            pitch=self.pitch if camera.pitch is None else camera.pitch,
            distance=self.distance if camera.distance is None else camera.distance,
            focal_factor=self.focal_factor,
        )
        projected = project(normalized, cam)
        t1 = time.perf_counter()
        zimg = rasterize(projected, self.zparams, (resolution, resolution), backend=backend)
        t2 = time.perf_counter()
        rgba = self.model.render(zimg, settings)
        t3 = time.perf_counter()
        timings = RenderTimings(
            project_ms=(t1 - t0) * 1e3,
            zbuffer_ms=(t2 - t1) * 1e3,
            forward_ms=(t3 - t2) * 1e3,
        )
        return rgba, timings
