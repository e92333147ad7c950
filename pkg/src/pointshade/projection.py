"""Pinhole projection and exponential-intensity z-buffer rasterization.

A point at camera depth d splats a constant window x window block (5x5 by
default) of intensity exp(-(d - alpha) / beta), clamped to 1; where splats
overlap the nearest point wins, and uncovered pixels are exactly 0.

The scatter kernel is compiled (pointshade._splat) when available and falls
back to a vectorized numpy implementation with identical output. Both are
kept importable so the benchmark can compare them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _splat_py

try:
    from . import _splat  # type: ignore[attr-defined]

    HAVE_COMPILED_SPLAT = True
except ImportError:
    _splat = None
    HAVE_COMPILED_SPLAT = False

# depth offset / scale of the intensity falloff; fixed once for training,
# inference and every experiment, with clouds normalized to the unit sphere.
# beta = 0.6 keeps the 0.5-intensity depth contour clearly inside sphere
# silhouettes at the canonical camera distance; at beta = 1.0 it lands on
# the rim and bright splats straddle the object boundary.
DEFAULT_ALPHA = 1.0
DEFAULT_BETA = 0.6
DEFAULT_WINDOW = 5

# canonical orbit used for training data and as the render default
DEFAULT_CAMERA_DISTANCE = 2.2
DEFAULT_CAMERA_PITCH = math.radians(25.0)
DEFAULT_FOCAL_FACTOR = 0.85

_NEAR_EPS = 1e-6


class DegenerateCloudError(ValueError):
    """All points coincide; the cloud has no usable extent."""


@dataclass(frozen=True)
class PointCloud:
    """N x 3 world-space coordinates; no normals, no colors."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"point cloud must be (N, 3), got {pts.shape}")
        if pts.shape[0] < 1:
            raise ValueError("point cloud must contain at least one point")
        if not np.isfinite(pts).all():
            raise ValueError("point cloud contains non-finite coordinates")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class Camera:
    """Look-at pinhole camera; u = cx + focal*X/Z, v = cy + focal*Y/Z."""

    position: np.ndarray
    target: np.ndarray
    up: np.ndarray
    focal_px: float
    principal_point: tuple[float, float]
    image_size: tuple[int, int]  # (W, H)

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=np.float64))
        object.__setattr__(self, "target", np.asarray(self.target, dtype=np.float64))
        object.__setattr__(self, "up", np.asarray(self.up, dtype=np.float64))
        if self.focal_px <= 0:
            raise ValueError("focal length must be positive")
        fwd = self.target - self.position
        norm = np.linalg.norm(fwd)
        if norm < _NEAR_EPS:
            raise ValueError("camera position and target coincide")
        if np.linalg.norm(np.cross(self.up, fwd / norm)) < _NEAR_EPS:
            raise ValueError("up vector is parallel to the view direction")

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Orthonormal (u_axis, v_axis, forward); forward is +Z in camera space."""
        fwd = self.target - self.position
        fwd = fwd / np.linalg.norm(fwd)
        u_axis = np.cross(self.up, fwd)
        u_axis = u_axis / np.linalg.norm(u_axis)
        v_axis = np.cross(u_axis, fwd)  # points toward increasing image row
        return u_axis, v_axis, fwd


def make_orbit_camera(
    resolution: int | tuple[int, int],
    yaw: float = 0.0,
    pitch: float = DEFAULT_CAMERA_PITCH,
    distance: float = DEFAULT_CAMERA_DISTANCE,
    target=(0.0, 0.0, 0.0),
    focal_factor: float = DEFAULT_FOCAL_FACTOR,
) -> Camera:
    """Camera orbiting ``target`` at spherical (yaw, pitch, distance).

    yaw spins about world +y, pitch lifts above the horizon; both radians.
    """
    if isinstance(resolution, int):
        w = h = resolution
    else:
        w, h = resolution
    target = np.asarray(target, dtype=np.float64)
    direction = np.array(
        [
            math.sin(yaw) * math.cos(pitch),
            math.sin(pitch),
            math.cos(yaw) * math.cos(pitch),
        ]
    )
    position = target + distance * direction
    return Camera(
        position=position,
        target=target,
        up=np.array([0.0, 1.0, 0.0]),
        focal_px=focal_factor * min(w, h),
        principal_point=((w - 1) / 2.0, (h - 1) / 2.0),
        image_size=(w, h),
    )


@dataclass(frozen=True)
class ZBufferParams:
    """Depth offset alpha, depth scale beta, odd splat window extent."""

    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA
    window: int = DEFAULT_WINDOW

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError("window must be odd and >= 1")


@dataclass(frozen=True)
class ZBufferImage:
    """H x W intensity grid in [0, 1]; uncovered pixels are exactly 0."""

    intensities: np.ndarray
    params: ZBufferParams


@dataclass(frozen=True)
class ProjectedPoint:
    u: float
    v: float
    depth: float


@dataclass
class ProjectedPoints:
    """Projected batch as parallel arrays (u, v continuous pixels; depth > 0).

    Struct-of-arrays rather than a list of ProjectedPoint: splatting 5k+
    points per frame is the pipeline's hot path. Indexing yields the
    per-point view when single points are wanted.
    """

    u: np.ndarray
    v: np.ndarray
    depth: np.ndarray

    def __len__(self) -> int:
        return self.u.shape[0]

    def __getitem__(self, i: int) -> ProjectedPoint:
        return ProjectedPoint(float(self.u[i]), float(self.v[i]), float(self.depth[i]))


def project(cloud: PointCloud, cam: Camera) -> ProjectedPoints:
    """Perspective-project every point with positive camera-space depth.

    Points at or behind the near plane are dropped; the caller decides
    whether an empty result is an error.
    """
    u_axis, v_axis, fwd = cam.basis()
    rel = cloud.points - cam.position
    z = rel @ fwd
    keep = z > _NEAR_EPS
    rel = rel[keep]
    z = z[keep]
    cx, cy = cam.principal_point
    u = cx + cam.focal_px * (rel @ u_axis) / z
    v = cy + cam.focal_px * (rel @ v_axis) / z
    return ProjectedPoints(u=u, v=v, depth=z)


def intensity(depth, params: ZBufferParams):
    """Eq-style exponential falloff exp(-(d - alpha)/beta), clamped to 1.

    Scalar in, scalar out; arrays pass through elementwise. Depths closer
    than alpha clamp to 1 so the network input stays in [0, 1].
    """
    d = np.asarray(depth, dtype=np.float32)
    val = np.minimum(np.exp(-(d - np.float32(params.alpha)) / np.float32(params.beta)),
                     np.float32(1.0))
    if np.ndim(depth) == 0:
        return float(val)
    return val


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest integer, halves away from zero (fixed tie-break)."""
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


def rasterize(
    projected: ProjectedPoints,
    params: ZBufferParams,
    image_size: tuple[int, int],
    backend: str = "auto",
) -> ZBufferImage:
    """Splat projected points into the z-buffer; nearest point wins per pixel.

    ``backend`` selects the scatter kernel: "auto" prefers the compiled
    extension, "compiled" requires it, "python" forces the numpy fallback.
    Off-image splats are clipped; splats whose window misses the image
    entirely are discarded up front.
    """
    w, h = image_size
    if w < 1 or h < 1:
        raise ValueError("image size must be positive")
    kernel = _scatter_backend(backend)

    u = round_half_away(projected.u)
    v = round_half_away(projected.v)
    r = params.window // 2
    keep = (u >= -r) & (u <= w - 1 + r) & (v >= -r) & (v <= h - 1 + r)
    us = u[keep].astype(np.int32)
    vs = v[keep].astype(np.int32)
    depths = projected.depth[keep].astype(np.float32)
    intens = intensity(projected.depth[keep], params)

    grid = kernel(us, vs, depths, intens, h, w, params.window)
    return ZBufferImage(intensities=grid, params=params)


def _scatter_backend(name: str):
    if name == "auto":
        return _splat.scatter_splats if HAVE_COMPILED_SPLAT else _splat_py.scatter_splats
    if name == "compiled":
        if not HAVE_COMPILED_SPLAT:
            raise RuntimeError("compiled splat kernel is not available")
        return _splat.scatter_splats
    if name == "python":
        return _splat_py.scatter_splats
    raise ValueError(f"unknown rasterizer backend {name!r}")


def scatter_backends() -> dict[str, bool]:
    """Availability map used by the benchmark to compare implementations."""
    return {"compiled": HAVE_COMPILED_SPLAT, "python": True}


def normalize_cloud(cloud: PointCloud) -> tuple[PointCloud, float, np.ndarray]:
    """Center on the centroid and scale the bounding sphere to radius 1.

    Returns (normalized cloud, scale, centroid) so callers can carry the
    transform back into the original frame. Raises DegenerateCloudError
    when all points coincide.
    """
    centroid = cloud.points.mean(axis=0)
    shifted = cloud.points - centroid
    radius = float(np.linalg.norm(shifted, axis=1).max())
    if radius < 1e-12:
        raise DegenerateCloudError("all points coincide; cannot normalize")
    return PointCloud(shifted / radius), radius, centroid
