"""Desk-scale training data: analytic scenes, point sampling, oracle renders.

A scene is one to three spheres resting above a shadow-catching floor plane
at y = 0, lit by a square area light. Targets come from a small built-in
ray tracer: sphere pixels are shaded diffusely (plus an optional
Blinn-Phong term under material control), floor pixels contribute only
shadow opacity to the alpha channel, and misses are fully transparent.

Light samples are the k stratified cell centers of the emitter square, so
renders are deterministic and exactly mirror-symmetric scenes produce
exactly mirrored images.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import fileio
from .network import Settings
from .projection import (
    Camera,
    PointCloud,
    ZBufferImage,
    ZBufferParams,
    make_orbit_camera,
    normalize_cloud,
    project,
    rasterize,
)
from .training import add_uniform_noise

_EPS = 1e-9
_SHADOW_BIAS = 1e-4


@dataclass(frozen=True)
class DatagenConfig:
    points: int = 2048
    noise_fraction: float = 0.0
    max_spheres: int = 3
    radius_range: tuple[float, float] = (0.18, 0.45)
    center_extent: float = 0.55
    lift_max: float = 0.5
    light_radius: float = 4.0
    elevation_range_deg: tuple[float, float] = (20.0, 70.0)
    ambient: float = 0.2
    k_d: float = 0.8
    light_half_extent: float = 0.3
    light_samples: int = 16
    specular_strength: float = 0.5
    material_control: bool = False
    camera_pitch: float = math.radians(25.0)
    camera_distance: float = 2.2
    focal_factor: float = 0.85
    zparams: ZBufferParams = field(default_factory=ZBufferParams)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "points", "noise_fraction", "max_spheres", "light_radius", "ambient", "k_d",
            "light_half_extent", "light_samples", "specular_strength", "material_control",
            "camera_pitch", "camera_distance", "focal_factor",
        )}
        d["radius_range"] = list(self.radius_range)
        d["center_extent"] = self.center_extent
        d["lift_max"] = self.lift_max
        d["elevation_range_deg"] = list(self.elevation_range_deg)
        d["zbuffer"] = {"alpha": self.zparams.alpha, "beta": self.zparams.beta, "window": self.zparams.window}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatagenConfig":
        d = dict(d)
        zb = d.pop("zbuffer")
        d["radius_range"] = tuple(d["radius_range"])
        d["elevation_range_deg"] = tuple(d["elevation_range_deg"])
        return cls(zparams=ZBufferParams(alpha=zb["alpha"], beta=zb["beta"], window=zb["window"]), **d)


@dataclass(frozen=True)
class SceneSpec:
    """Analytic scene: spheres above a (possibly absent) floor at y = 0."""

    spheres: tuple[tuple[tuple[float, float, float], float], ...]
    floor: bool
    color: tuple[float, float, float]
    ambient: float = 0.2
    k_d: float = 0.8
    light_half_extent: float = 0.3
    light_samples: int = 16
    specular_strength: float = 0.5
    material: tuple[float, float] | None = None

    def __post_init__(self):
        for center, radius in self.spheres:
            if radius <= 0:
                raise ValueError("sphere radius must be positive")
            if self.floor and center[1] < radius - 1e-9:
                raise ValueError("sphere dips below the floor plane")


@dataclass
class SceneSample:
    """One training pair: scene, sampled cloud, settings, target and z-buffer."""

    scene: SceneSpec
    cloud: PointCloud
    settings: Settings
    target: np.ndarray  # (4, H, W) float32
    zbuffer: ZBufferImage
    scale: float
    centroid: np.ndarray


def sample_scene(rng: np.random.Generator, config: DatagenConfig) -> tuple[SceneSpec, Settings]:
    """Random spheres + random color and light placement.

    Sphere arrangements get a random spin about the vertical axis through
    their centroid; light elevation stays in the configured band so shadows
    land on the floor, and the light orbit radius is held fixed.
    """
    count = int(rng.integers(1, config.max_spheres + 1))
    lo, hi = config.radius_range
    radii = rng.uniform(lo, hi, count)
    centers = np.empty((count, 3))
    centers[:, 0] = rng.uniform(-config.center_extent, config.center_extent, count)
    centers[:, 2] = rng.uniform(-config.center_extent, config.center_extent, count)
    centers[:, 1] = radii + rng.uniform(0.0, config.lift_max, count)

    spin = rng.uniform(0.0, 2.0 * math.pi)
    pivot = centers.mean(axis=0)
    cs, sn = math.cos(spin), math.sin(spin)
    rel = centers - pivot
    centers = pivot + np.column_stack(
        [cs * rel[:, 0] + sn * rel[:, 2], rel[:, 1], -sn * rel[:, 0] + cs * rel[:, 2]]
    )

    color = tuple(float(v) for v in rng.uniform(0.0, 1.0, 3))
    azimuth = float(rng.uniform(0.0, 2.0 * math.pi))
    elo, ehi = config.elevation_range_deg
    elevation = math.radians(float(rng.uniform(elo, ehi)))
    material = None
    if config.material_control:
        material = (float(rng.uniform()), float(rng.uniform()))

    scene = SceneSpec(
        spheres=tuple((tuple(float(v) for v in c), float(r)) for c, r in zip(centers, radii)),
        floor=True,
        color=color,
        ambient=config.ambient,
        k_d=config.k_d,
        light_half_extent=config.light_half_extent,
        light_samples=config.light_samples,
        specular_strength=config.specular_strength,
        material=material,
    )
    settings = Settings(color=color, light=(azimuth, elevation, config.light_radius), material=material)
    return scene, settings


def sample_points(scene: SceneSpec, n: int, rng: np.random.Generator) -> PointCloud:
    """n points uniform by surface area over the union of sphere surfaces."""
    if n < 1:
        raise ValueError("need at least one point")
    radii = np.array([r for _, r in scene.spheres])
    areas = radii ** 2  # 4*pi cancels in the ratio
    counts = rng.multinomial(n, areas / areas.sum())
    chunks = []
    for (center, radius), k in zip(scene.spheres, counts):
        if k == 0:
            continue
        dirs = rng.normal(size=(k, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        chunks.append(np.asarray(center) + radius * dirs)
    return PointCloud(np.vstack(chunks))


def _light_basis(light_pos: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    normal = target - light_pos
    normal = normal / np.linalg.norm(normal)
    up = np.array([0.0, 1.0, 0.0])
    e1 = np.cross(up, normal)
    n1 = np.linalg.norm(e1)
    if n1 < 1e-8:  # light straight overhead
        e1 = np.array([1.0, 0.0, 0.0])
    else:
        e1 = e1 / n1
    e2 = np.cross(normal, e1)
    return e1, e2


def light_position(cam: Camera, settings: Settings, light_scale: float = 1.0) -> np.ndarray:
    """Resolve the light's spherical-relative-to-camera coordinates.

    Azimuth is measured from the camera's own azimuth about world up, so
    azimuth 0 puts the light in the camera's vertical plane; elevation is
    from the horizon and the radius orbits the camera's look-at target.
    """
    rel = cam.position - cam.target
    yaw = math.atan2(rel[0], rel[2])
    az, el, radius = settings.light
    direction = np.array(
        [
            math.sin(yaw + az) * math.cos(el),
            math.sin(el),
            math.cos(yaw + az) * math.cos(el),
        ]
    )
    return cam.target + light_scale * radius * direction


def _light_samples(light_pos, target, half_extent, count) -> np.ndarray:
    """Stratified cell centers of the emitter square: deterministic."""
    side = max(1, int(round(math.sqrt(count))))
    e1, e2 = _light_basis(light_pos, target)
    ticks = ((np.arange(side) + 0.5) / side - 0.5) * 2.0 * half_extent
    aa, bb = np.meshgrid(ticks, ticks, indexing="ij")
    return light_pos + aa.reshape(-1, 1) * e1 + bb.reshape(-1, 1) * e2


def _sphere_hits(origin: np.ndarray, dirs: np.ndarray, scene: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    """Nearest sphere intersection per unit ray: (t, sphere index or -1)."""
    m = dirs.shape[0]
    t_best = np.full(m, np.inf)
    hit_idx = np.full(m, -1, dtype=np.int64)
    for i, (center, radius) in enumerate(scene.spheres):
        oc = origin - np.asarray(center)
        b = dirs @ oc
        c = oc @ oc - radius * radius
        disc = b * b - c
        ok = disc >= 0.0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t0 = -b - sq
        t1 = -b + sq
        t = np.where(t0 > _EPS, t0, np.where(t1 > _EPS, t1, np.inf))
        t = np.where(ok, t, np.inf)
        closer = t < t_best
        t_best = np.where(closer, t, t_best)
        hit_idx = np.where(closer, i, hit_idx)
    return t_best, hit_idx


def _segment_occluded(points: np.ndarray, samples: np.ndarray, scene: SceneSpec) -> np.ndarray:
    """visibility[i, k]: 1 when the segment point->light sample is clear."""
    m = points.shape[0]
    k = samples.shape[0]
    vis = np.ones((m, k))
    seg = samples[None, :, :] - points[:, None, :]  # (m, k, 3)
    dist = np.linalg.norm(seg, axis=2)
    dirs = seg / np.maximum(dist, _EPS)[:, :, None]
    for center, radius in scene.spheres:
        oc = points[:, None, :] - np.asarray(center)
        b = np.einsum("mkc,mkc->mk", dirs, np.broadcast_to(oc, dirs.shape))
        c = np.einsum("mkc,mkc->mk", oc, oc) - radius * radius
        disc = b * b - c
        ok = disc > 0.0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t0 = -b - sq
        t1 = -b + sq
        t = np.where(t0 > _SHADOW_BIAS, t0, t1)
        blocked = ok & (t > _SHADOW_BIAS) & (t < dist - _SHADOW_BIAS)
        vis[blocked] = 0.0
    return vis


def render_reference(
    scene: SceneSpec,
    cam: Camera,
    settings: Settings,
    light_scale: float = 1.0,
) -> np.ndarray:
    """Ray-trace the ground-truth RGBA target, (4, H, W) float32 in [0, 1].

    Sphere pixels: color * (ambient + k_d * mean_k[max(0, n.l_k) * vis_k]),
    plus the optional material term; alpha 1. Floor pixels: shadow catcher,
    alpha = 1 - visibility with zero RGB. Misses are (0, 0, 0, 0).
    """
    w, h = cam.image_size
    u_axis, v_axis, fwd = cam.basis()
    cx, cy = cam.principal_point
    xs = (np.arange(w) - cx) / cam.focal_px
    ys = (np.arange(h) - cy) / cam.focal_px
    gx, gy = np.meshgrid(xs, ys)
    dirs = gx[..., None] * u_axis + gy[..., None] * v_axis + fwd
    dirs /= np.linalg.norm(dirs, axis=2, keepdims=True)
    dirs = dirs.reshape(-1, 3)

    t_sph, idx_sph = _sphere_hits(cam.position, dirs, scene)
    if scene.floor:
        dy = dirs[:, 1]
        t_floor = np.where(np.abs(dy) > _EPS, -cam.position[1] / np.where(np.abs(dy) > _EPS, dy, 1.0), np.inf)
        t_floor = np.where(t_floor > _EPS, t_floor, np.inf)
    else:
        t_floor = np.full(dirs.shape[0], np.inf)

    sphere_mask = np.isfinite(t_sph) & (t_sph <= t_floor)
    floor_mask = np.isfinite(t_floor) & ~sphere_mask

    out = np.zeros((h * w, 4), dtype=np.float64)
    light_pos = light_position(cam, settings, light_scale)
    samples = _light_samples(light_pos, cam.target, scene.light_half_extent * light_scale, scene.light_samples)
    color = np.asarray(scene.color)

    if sphere_mask.any():
        t = t_sph[sphere_mask]
        d = dirs[sphere_mask]
        hits = cam.position + t[:, None] * d
        centers = np.array([c for c, _ in scene.spheres])
        radii = np.array([r for _, r in scene.spheres])
        which = idx_sph[sphere_mask]
        normals = (hits - centers[which]) / radii[which][:, None]

        vis = _segment_occluded(hits + _SHADOW_BIAS * normals, samples, scene)
        ldirs = samples[None, :, :] - hits[:, None, :]
        ldirs /= np.maximum(np.linalg.norm(ldirs, axis=2, keepdims=True), _EPS)
        ndotl = np.maximum(0.0, np.einsum("mkc,mc->mk", ldirs, normals))
        diffuse = (ndotl * vis).mean(axis=1)

        rgb = color[None, :] * (scene.ambient + scene.k_d * diffuse[:, None])
        if scene.material is not None:
            metallic, roughness = scene.material
            view = -d
            half = ldirs + view[:, None, :]
            half /= np.maximum(np.linalg.norm(half, axis=2, keepdims=True), _EPS)
            shininess = 2.0 ** (2.0 + 8.0 * (1.0 - roughness))
            ndoth = np.maximum(0.0, np.einsum("mkc,mc->mk", half, normals))
            highlight = (vis * ndoth ** shininess).mean(axis=1)
            tint = (1.0 - metallic) * np.ones(3) + metallic * color
            rgb += scene.specular_strength * (1.0 - roughness) * highlight[:, None] * tint[None, :]
        out[sphere_mask, :3] = np.clip(rgb, 0.0, 1.0)
        out[sphere_mask, 3] = 1.0

    if floor_mask.any():
        t = t_floor[floor_mask]
        hits = cam.position + t[:, None] * dirs[floor_mask]
        hits[:, 1] = _SHADOW_BIAS  # lift off the plane before shadow rays
        vis = _segment_occluded(hits, samples, scene).mean(axis=1)
        out[floor_mask, 3] = 1.0 - vis

    return out.reshape(h, w, 4).transpose(2, 0, 1).astype(np.float32)


def make_sample(index: int, resolution: int, config: DatagenConfig, master_seed: int) -> SceneSample:
    """Generate one fully deterministic sample from (master seed, index)."""
    rng = np.random.default_rng([master_seed, index])
    scene, settings = sample_scene(rng, config)
    cloud = sample_points(scene, config.points, rng)
    if config.noise_fraction > 0.0:
        cloud = add_uniform_noise(cloud, config.noise_fraction, rng)
    normalized, scale, centroid = normalize_cloud(cloud)

    cam_norm = make_orbit_camera(
        resolution,
        pitch=config.camera_pitch,
        distance=config.camera_distance,
        focal_factor=config.focal_factor,
    )
    zbuffer = rasterize(project(normalized, cam_norm), config.zparams, (resolution, resolution))

    cam_scene = make_orbit_camera(
        resolution,
        pitch=config.camera_pitch,
        distance=config.camera_distance * scale,
        target=centroid,
        focal_factor=config.focal_factor,
    )
    target = render_reference(scene, cam_scene, settings, light_scale=scale)
    return SceneSample(
        scene=scene,
        cloud=cloud,
        settings=settings,
        target=target,
        zbuffer=zbuffer,
        scale=scale,
        centroid=centroid,
    )


def make_dataset(count: int, resolution: int, config: DatagenConfig, master_seed: int):
    """Yield ``count`` samples; deterministic and independent per index."""
    if count < 1:
        raise ValueError("count must be >= 1")
    for i in range(count):
        yield make_sample(i, resolution, config, master_seed)


# ---------------------------------------------------------------------------
# on-disk dataset format

ZBUF_MAGIC = b"ZBUF"


def write_zbuffer(zimg: ZBufferImage, path) -> None:
    import struct

    grid = np.ascontiguousarray(zimg.intensities, dtype="<f4")
    h, w = grid.shape
    with open(path, "wb") as fh:
        fh.write(ZBUF_MAGIC)
        fh.write(struct.pack("<II", h, w))
        fh.write(struct.pack("<ff", zimg.params.alpha, zimg.params.beta))
        fh.write(struct.pack("<I", zimg.params.window))
        fh.write(grid.tobytes())


def read_zbuffer(path) -> ZBufferImage:
    import struct

    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != ZBUF_MAGIC:
        raise ValueError(f"{path}: bad z-buffer magic")
    h, w = struct.unpack_from("<II", data, 4)
    alpha, beta = struct.unpack_from("<ff", data, 12)
    (window,) = struct.unpack_from("<I", data, 20)
    expected = 24 + 4 * h * w
    if len(data) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, got {len(data)}")
    grid = np.frombuffer(data, dtype="<f4", offset=24).reshape(h, w).copy()
    return ZBufferImage(intensities=grid, params=ZBufferParams(alpha=alpha, beta=beta, window=window))


def write_settings(settings: Settings, path) -> None:
    lines = [
        f"color_r={settings.color[0]!r}",
        f"color_g={settings.color[1]!r}",
        f"color_b={settings.color[2]!r}",
        f"light_az={settings.light[0]!r}",
        f"light_el={settings.light[1]!r}",
        f"light_radius={settings.light[2]!r}",
    ]
    if settings.material is not None:
        lines.append(f"metallic={settings.material[0]!r}")
        lines.append(f"roughness={settings.material[1]!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_settings(path) -> Settings:
    values: dict[str, float] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        key, _, value = line.partition("=")
        if not _:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
        values[key.strip()] = float(value)
    material = None
    if "metallic" in values:
        material = (values["metallic"], values["roughness"])
    return Settings(
        color=(values["color_r"], values["color_g"], values["color_b"]),
        light=(values["light_az"], values["light_el"], values["light_radius"]),
        material=material,
    )


def save_dataset(out_dir, count: int, resolution: int, config: DatagenConfig, master_seed: int,
                 progress=None) -> list[str]:
    """Write samples + manifest under ``out_dir``; returns sample dir names."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for i, sample in enumerate(make_dataset(count, resolution, config, master_seed)):
        name = f"sample_{i:05d}"
        sdir = out / name
        sdir.mkdir(exist_ok=True)
        write_zbuffer(sample.zbuffer, sdir / "zbuffer.bin")
        write_settings(sample.settings, sdir / "settings.txt")
        fileio.write_png_rgba(sample.target, sdir / "target.png")
        names.append(name)
        if progress is not None:
            progress(i + 1, count)
    manifest = {
        "format": "pointshade-dataset",
        "version": 1,
        "count": count,
        "resolution": resolution,
        "seed": master_seed,
        "config": config.to_dict(),
        "samples": names,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return names


def load_dataset(data_dir) -> tuple[list[tuple[np.ndarray, np.ndarray, np.ndarray]], dict]:
    """Load (zbuffer, settings vector, target) triples plus the manifest."""
    root = Path(data_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.json under {root}")
    manifest = json.loads(manifest_path.read_text())
    triples = []
    for name in manifest["samples"]:
        sdir = root / name
        zimg = read_zbuffer(sdir / "zbuffer.bin")
        settings = read_settings(sdir / "settings.txt")
        target = fileio.read_png_rgba(sdir / "target.png")
        triples.append((zimg.intensities, settings.vector(), target))
    return triples, manifest
