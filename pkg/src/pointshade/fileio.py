"""Point-cloud parsing, PNG output, and the versioned weights container.

Weights container layout (all integers little-endian):

    magic  b"Z2PW"
    u32    format version (currently 1)
    u32    header length, followed by that many bytes of UTF-8 JSON
           (architecture config, Fourier frequencies + seed, z-buffer
           params, camera defaults, training provenance)
    u32    record count, then per record:
               u32 name length, name bytes,
               u32 ndim, u32 dims...,
               u64 payload bytes, float32 LE values

Loading a bundle into a mismatched architecture fails naming the first
offending parameter; unknown versions and truncated files are rejected
before any model state is touched.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from . import encoding as fenc
from .network import RenderModel, UNetConfig
from .projection import (
    DEFAULT_CAMERA_DISTANCE,
    DEFAULT_CAMERA_PITCH,
    DEFAULT_FOCAL_FACTOR,
    PointCloud,
    ZBufferParams,
)

MAGIC = b"Z2PW"
FORMAT_VERSION = 1


class PointCloudParseError(ValueError):
    """Malformed cloud file; message carries the offending line."""


class ModelFormatError(ValueError):
    """Weights container is corrupt, truncated, or incompatible."""


# ---------------------------------------------------------------------------
# point clouds

def read_point_cloud(path) -> PointCloud:
    """Parse whitespace XYZ text or ASCII PLY; normals/colors are ignored."""
    with open(path, "rb") as fh:
        return parse_point_cloud(fh.read())


def parse_point_cloud(data: bytes) -> PointCloud:
    """Bytes-level entry point shared by the CLI and the HTTP service."""
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise PointCloudParseError(f"not a text point-cloud file: {exc}") from None
    if text.lstrip()[:3].lower() == "ply":
        return _parse_ply(text)
    return _parse_xyz(text)


def _parse_float_triple(tokens, lineno, minimum=3):
    if len(tokens) < minimum:
        raise PointCloudParseError(f"line {lineno}: expected at least {minimum} values, got {len(tokens)}")
    try:
        vals = [float(t) for t in tokens[:minimum]]
    except ValueError:
        raise PointCloudParseError(f"line {lineno}: non-numeric coordinate {tokens[:minimum]}") from None
    if not all(np.isfinite(vals)):
        raise PointCloudParseError(f"line {lineno}: non-finite coordinate")
    return vals


def _parse_xyz(text: str) -> PointCloud:
    points = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        points.append(_parse_float_triple(line.split(), lineno))
    if not points:
        raise PointCloudParseError("file contains no points")
    return PointCloud(np.asarray(points, dtype=np.float64))


def _parse_ply(text: str) -> PointCloud:
    lines = text.splitlines()
    vertex_count = None
    elements: list[tuple[str, int]] = []  # declaration order
    vertex_props: list[str] = []
    current_element = None
    header_end = None

    lineno = 0
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if lineno == 1:
            if line.lower() != "ply":
                raise PointCloudParseError("line 1: missing 'ply' magic")
            continue
        if not line or line.startswith("comment"):
            continue
        if line.startswith("format"):
            if "ascii" not in line:
                raise PointCloudParseError(f"line {lineno}: only ASCII PLY is supported, got {line!r}")
            continue
        if line.startswith("element"):
            parts = line.split()
            if len(parts) != 3:
                raise PointCloudParseError(f"line {lineno}: malformed element declaration {line!r}")
            try:
                count = int(parts[2])
            except ValueError:
                raise PointCloudParseError(f"line {lineno}: bad element count {parts[2]!r}") from None
            if count < 0:
                raise PointCloudParseError(f"line {lineno}: negative element count")
            current_element = parts[1]
            elements.append((current_element, count))
            if current_element == "vertex":
                vertex_count = count
            continue
        if line.startswith("property"):
            if current_element == "vertex":
                vertex_props.append(line.split()[-1])
            continue
        if line == "end_header":
            header_end = lineno
            break
        raise PointCloudParseError(f"line {lineno}: unexpected header line {line!r}")

    if header_end is None:
        raise PointCloudParseError("missing end_header")
    if vertex_count is None:
        raise PointCloudParseError("header declares no vertex element")
    if vertex_count == 0:
        raise PointCloudParseError("element 'vertex' declares zero vertices")
    try:
        ix, iy, iz = (vertex_props.index(axis) for axis in ("x", "y", "z"))
    except ValueError:
        raise PointCloudParseError("vertex element lacks x, y, z properties") from None

    body = [
        (header_end + i + 1, lines[header_end + i].split())
        for i in range(len(lines) - header_end)
        if lines[header_end + i].strip()
    ]
    rows = []
    consumed = 0
    for name, count in elements:
        if name != "vertex":
            consumed += count  # skip payload of other elements in order
            continue
        chunk = body[consumed : consumed + count]
        if len(chunk) < count:
            raise PointCloudParseError(
                f"element 'vertex' declares {count} vertices but file has {len(chunk)}"
            )
        for lineno, tokens in chunk:
            if len(tokens) < len(vertex_props):
                raise PointCloudParseError(
                    f"line {lineno}: expected {len(vertex_props)} properties, got {len(tokens)}"
                )
            try:
                rows.append([float(tokens[ix]), float(tokens[iy]), float(tokens[iz])])
            except ValueError:
                raise PointCloudParseError(f"line {lineno}: non-numeric vertex coordinate") from None
            if not all(np.isfinite(rows[-1])):
                raise PointCloudParseError(f"line {lineno}: non-finite vertex coordinate")
        consumed += count
    return PointCloud(np.asarray(rows, dtype=np.float64))


# ---------------------------------------------------------------------------
# images

def write_png_rgba(image: np.ndarray, path) -> None:
    """Write a float image in [0, 1] as 8-bit RGBA; v maps to round(v*255)."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[0] == 4:
        arr = arr.transpose(1, 2, 0)
    if arr.ndim != 3 or arr.shape[2] != 4:
        raise ValueError(f"expected (4, H, W) or (H, W, 4) image, got {arr.shape}")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    quantized = np.floor(arr * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(quantized, mode="RGBA").save(path, format="PNG")


def read_png_rgba(path) -> np.ndarray:
    """Load an RGBA PNG back to (4, H, W) float32 in [0, 1]."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGBA"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)


def encode_png_rgba(image: np.ndarray) -> bytes:
    """PNG bytes of a (4, H, W) float image; used by the render service."""
    import io as _io

    buf = _io.BytesIO()
    arr = np.asarray(image, dtype=np.float64).transpose(1, 2, 0)
    quantized = np.floor(arr * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(quantized, mode="RGBA").save(buf, format="PNG")
    return buf.getvalue()


# ---------------------------------------------------------------------------
# model bundle

@dataclass
class ModelBundle:
    """Everything needed to reproduce inference: config, frequencies, weights."""

    config: UNetConfig
    frequencies: np.ndarray | None
    encoding_seed: int | None
    params: dict[str, np.ndarray]
    zparams: ZBufferParams = field(default_factory=ZBufferParams)
    camera: dict = field(default_factory=lambda: {
        "pitch": DEFAULT_CAMERA_PITCH,
        "distance": DEFAULT_CAMERA_DISTANCE,
        "focal_factor": DEFAULT_FOCAL_FACTOR,
    })
    provenance: dict = field(default_factory=dict)

    def encoding(self) -> fenc.FourierEncoding | None:
        if self.frequencies is None:
            return None
        return fenc.FourierEncoding(frequencies=self.frequencies, seed=self.encoding_seed or 0)


def bundle_from_model(
    model: RenderModel,
    zparams: ZBufferParams | None = None,
    camera: dict | None = None,
    provenance: dict | None = None,
) -> ModelBundle:
    freqs = model.encoding.frequencies if model.encoding is not None else None
    seed = model.encoding.seed if model.encoding is not None else None
    return ModelBundle(
        config=model.config,
        frequencies=freqs,
        encoding_seed=seed,
        params={p.name: p.data.astype(np.float32) for p in model.parameters()},
        zparams=zparams or ZBufferParams(),
        camera=camera or {
            "pitch": DEFAULT_CAMERA_PITCH,
            "distance": DEFAULT_CAMERA_DISTANCE,
            "focal_factor": DEFAULT_FOCAL_FACTOR,
        },
        provenance=provenance or {},
    )


def model_from_bundle(bundle: ModelBundle) -> RenderModel:
    """Instantiate the network and load every parameter, strictly."""
    model = RenderModel(bundle.config, enc=bundle.encoding(), init_seed=int(bundle.provenance.get("init_seed", 0)))
    params = {p.name: p for p in model.parameters()}
    missing = sorted(set(params) - set(bundle.params))
    extra = sorted(set(bundle.params) - set(params))
    if missing or extra:
        detail = []
        if missing:
            detail.append(f"missing {missing[0]}")
        if extra:
            detail.append(f"unexpected {extra[0]}")
        raise ModelFormatError(f"bundle does not match architecture: {', '.join(detail)}")
    for name in sorted(params):
        stored = bundle.params[name]
        if stored.shape != params[name].data.shape:
            raise ModelFormatError(
                f"parameter {name!r}: bundle shape {stored.shape} does not match "
                f"model shape {params[name].data.shape}"
            )
        params[name].assign(stored)
    return model


def save_model(bundle: ModelBundle, path) -> None:
    header = {
        "config": bundle.config.to_dict(),
        "frequencies": None if bundle.frequencies is None else [float(v) for v in bundle.frequencies],
        "encoding_seed": bundle.encoding_seed,
        "zbuffer": {
            "alpha": bundle.zparams.alpha,
            "beta": bundle.zparams.beta,
            "window": bundle.zparams.window,
        },
        "camera": bundle.camera,
        "provenance": bundle.provenance,
    }
    header_bytes = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(struct.pack("<I", len(bundle.params)))
        for name in sorted(bundle.params):
            data = np.ascontiguousarray(bundle.params[name], dtype="<f4")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            payload = data.tobytes()
            fh.write(struct.pack("<Q", len(payload)))
            fh.write(payload)


def load_model(path) -> ModelBundle:
    with open(path, "rb") as fh:
        data = fh.read()
    view = memoryview(data)
    pos = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise ModelFormatError(f"truncated file while reading {what}")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4, "magic")) != MAGIC:
        raise ModelFormatError(f"bad magic; expected {MAGIC!r}")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported format version {version}")
    (header_len,) = struct.unpack("<I", take(4, "header length"))
    try:
        header = json.loads(bytes(take(header_len, "header")).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"corrupt header: {exc}") from None

    (count,) = struct.unpack("<I", take(4, "record count"))
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = bytes(take(name_len, "name")).decode("utf-8")
        if name in params:
            raise ModelFormatError(f"duplicate parameter {name!r}")
        (ndim,) = struct.unpack("<I", take(4, "ndim"))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, "dims"))
        (nbytes,) = struct.unpack("<Q", take(8, "payload length"))
        expected = 4 * int(np.prod(shape)) if ndim else 4
        if nbytes != expected:
            raise ModelFormatError(f"parameter {name!r}: payload {nbytes} bytes, expected {expected}")
        arr = np.frombuffer(take(nbytes, f"parameter {name!r}"), dtype="<f4").reshape(shape)
        params[name] = arr.copy()
    if pos != len(view):
        raise ModelFormatError(f"{len(view) - pos} trailing bytes after last record")

    try:
        config = UNetConfig.from_dict(header["config"])
        zb = header["zbuffer"]
        zparams = ZBufferParams(alpha=zb["alpha"], beta=zb["beta"], window=zb["window"])
        freqs = header["frequencies"]
        bundle = ModelBundle(
            config=config,
            frequencies=None if freqs is None else np.asarray(freqs, dtype=np.float64),
            encoding_seed=header.get("encoding_seed"),
            params=params,
            zparams=zparams,
            camera=header.get("camera", {}),
            provenance=header.get("provenance", {}),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"invalid header contents: {exc}") from None
    if config.encoding_enabled and bundle.frequencies is None:
        raise ModelFormatError("encoding enabled but no frequencies stored")
    if not config.encoding_enabled and bundle.frequencies is not None:
        raise ModelFormatError("encoding disabled but frequencies present")
    return bundle
