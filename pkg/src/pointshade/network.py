"""Settings-conditioned U-Net: z-buffer in, shaded RGBA out.

The 6-vector of visualization settings (RGB color + spherical light
position, optionally extended by metallic/roughness) is lifted by an MLP
to a 512-wide style vector that every feature-normalization layer consumes
through its own pair of learned affines: scale and shift land on the
spatially-normalized feature map after each convolution. The alternative
"feature_append" mode replicates the raw settings as extra input planes
and keeps plain instance normalization, for ablation.

Encoder downsampling is stride-2 convolution, decoder upsampling is
nearest-neighbor + convolution, skips concatenate channels. All four
output channels pass through a sigmoid.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import encoding as fenc
from .projection import ZBufferImage

STYLE_DIM = 512
MAPPING_HIDDEN_LAYERS = 3
LEAKY_SLOPE = 0.2
ADAIN_EPS = 1e-5
OUTPUT_CHANNELS = 4
SETTINGS_BASE_LEN = 6
SETTINGS_MATERIAL_LEN = 8


@dataclass(frozen=True)
class Settings:
    """Conditioning vector: color in [0,1]^3, light (azimuth, elevation,
    radius) in radians/world units relative to the camera, optional
    (metallic, roughness) material scalars."""

    color: tuple[float, float, float]
    light: tuple[float, float, float]
    material: tuple[float, float] | None = None

    def vector(self) -> np.ndarray:
        vals = list(self.color) + list(self.light)
        if self.material is not None:
            vals += list(self.material)
        vec = np.asarray(vals, dtype=np.float32)
        if not np.isfinite(vec).all():
            raise ValueError("settings contain non-finite values")
        return vec

    def __len__(self) -> int:
        return SETTINGS_MATERIAL_LEN if self.material is not None else SETTINGS_BASE_LEN


@dataclass(frozen=True)
class UNetConfig:
    levels: int = 4
    base_channels: int = 64
    settings_mode: str = "adain"  # "adain" | "feature_append"
    encoding_enabled: bool = True
    settings_length: int = SETTINGS_BASE_LEN

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")
        if self.settings_mode not in ("adain", "feature_append"):
            raise ValueError(f"unknown settings_mode {self.settings_mode!r}")
        if self.settings_length not in (SETTINGS_BASE_LEN, SETTINGS_MATERIAL_LEN):
            raise ValueError("settings_length must be 6 or 8")

    @property
    def input_channels(self) -> int:
        ch = 1
        if self.encoding_enabled:
            ch += fenc.CHANNELS
        if self.settings_mode == "feature_append":
            ch += self.settings_length
        return ch

    @property
    def size_divisor(self) -> int:
        return 2 ** self.levels

    def to_dict(self) -> dict:
        return {
            "levels": self.levels,
            "base_channels": self.base_channels,
            "settings_mode": self.settings_mode,
            "encoding_enabled": self.encoding_enabled,
            "settings_length": self.settings_length,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        return cls(**d)


def receptive_field_radius(levels: int) -> int:
    # two 3x3 convs + one downsampling conv per level, two bottleneck convs,
    # two decoder convs per level, one output conv; each adds (k//2)*stride
    return 7 * 2 ** levels - 4


class _Conv:
    def __init__(self, name, c_in, c_out, rng, dtype, stride=1, k=3):
        std = np.sqrt(2.0 / (c_in * k * k))
        self.weight = ad.Parameter(rng.normal(0.0, std, (c_out, c_in, k, k)), f"{name}.weight", dtype)
        self.bias = ad.Parameter(np.zeros(c_out), f"{name}.bias", dtype)
        self.stride = stride
        self.padding = k // 2

    def __call__(self, x):
        return ad.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)

    def parameters(self):
        return [self.weight, self.bias]


class _Affine:
    def __init__(self, name, d_in, d_out, rng, dtype, w_std=None, bias_init=0.0):
        std = np.sqrt(2.0 / d_in) if w_std is None else w_std
        self.weight = ad.Parameter(rng.normal(0.0, std, (d_out, d_in)), f"{name}.weight", dtype)
        self.bias = ad.Parameter(np.full(d_out, bias_init, dtype=np.float64), f"{name}.bias", dtype)

    def __call__(self, x):
        return ad.linear(x, self.weight, self.bias)

    def parameters(self):
        return [self.weight, self.bias]


def _normalize_spatial(x, eps):
    """(x - mean)/(std + eps) per sample and channel over H x W."""
    mu = ad.tmean(x, axes=(2, 3), keepdims=True)
    centered = ad.sub(x, mu)
    std = ad.sqrt(ad.tmean(ad.square(centered), axes=(2, 3), keepdims=True))
    return ad.div(centered, ad.add(std, eps))


class MappingNetwork:
    """MLP lifting the settings vector to the shared 512-d style vector."""

    def __init__(self, settings_length, rng, dtype):
        self.layers = []
        d_in = settings_length
        for i in range(MAPPING_HIDDEN_LAYERS):
            self.layers.append(_Affine(f"mapping.fc{i}", d_in, STYLE_DIM, rng, dtype))
            d_in = STYLE_DIM
        self.layers.append(_Affine(f"mapping.fc{MAPPING_HIDDEN_LAYERS}", d_in, STYLE_DIM, rng, dtype))

    def __call__(self, s):
        h = s
        for layer in self.layers[:-1]:
            h = ad.leaky_relu(layer(h), LEAKY_SLOPE)
        return self.layers[-1](h)

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]


class AdaInLayer:
    """Spatial normalization re-styled by two per-layer affines of w.

    gamma = A_gamma(w), beta = A_beta(w); out = gamma*(x-mu)/(std+eps)+beta
    per channel. The affine weights start near zero with gamma bias 1 so an
    untrained layer behaves like plain instance normalization (and the
    mapping network receives gradient from step one).
    """

    def __init__(self, name, channels, rng, dtype, eps=ADAIN_EPS):
        self.gamma = _Affine(f"{name}.gamma", STYLE_DIM, channels, rng, dtype, w_std=0.02, bias_init=1.0)
        self.beta = _Affine(f"{name}.beta", STYLE_DIM, channels, rng, dtype, w_std=0.02, bias_init=0.0)
        self.channels = channels
        self.eps = eps

    def __call__(self, x, w, capture: list | None = None):
        if x.shape[1] != self.channels:
            raise ValueError(f"adain expects {self.channels} channels, got {x.shape[1]}")
        normalized = _normalize_spatial(x, self.eps)
        if capture is not None:
            capture.append(normalized.data)
        n, c = x.shape[:2]
        gamma = ad.reshape(self.gamma(w), (n, c, 1, 1))
        beta = ad.reshape(self.beta(w), (n, c, 1, 1))
        return ad.add(ad.mul(gamma, normalized), beta)

    def parameters(self):
        return self.gamma.parameters() + self.beta.parameters()


class _PlainNorm:
    """Instance normalization without learned affine (feature_append mode)."""

    def __init__(self, channels, eps=ADAIN_EPS):
        self.channels = channels
        self.eps = eps

    def __call__(self, x, w=None, capture: list | None = None):
        normalized = _normalize_spatial(x, self.eps)
        if capture is not None:
            capture.append(normalized.data)
        return normalized

    def parameters(self):
        return []


def map_settings(s: Settings | np.ndarray, net: MappingNetwork) -> np.ndarray:
    """Settings (or raw vector) through the mapping MLP; returns (512,)."""
    vec = s.vector() if isinstance(s, Settings) else np.asarray(s, dtype=np.float32)
    expected = net.layers[0].weight.shape[1]
    if vec.shape != (expected,):
        raise ValueError(f"settings length {vec.shape} does not match model ({expected},)")
    out = net(ad.Tensor(vec[None, :]))
    return out.data[0]


def adain(x: ad.Tensor, w: ad.Tensor, layer: AdaInLayer) -> ad.Tensor:
    """Functional form of the styled normalization for a single layer."""
    return layer(x, w)


class RenderModel:
    """The full conditioned U-Net plus its mapping network and encoding."""

    def __init__(
        self,
        config: UNetConfig,
        enc: fenc.FourierEncoding | None = None,
        init_seed: int = 0,
        dtype=np.float32,
    ):
        if config.encoding_enabled and enc is None:
            enc = fenc.sample_frequencies(init_seed)
        if not config.encoding_enabled:
            enc = None
        self.config = config
        self.encoding = enc
        self.init_seed = init_seed
        rng = np.random.default_rng(init_seed)

        adain_mode = config.settings_mode == "adain"
        self.mapping = MappingNetwork(config.settings_length, rng, dtype) if adain_mode else None

        def norm(name, channels):
            if adain_mode:
                return AdaInLayer(name, channels, rng, dtype)
            return _PlainNorm(channels)

        L = config.levels
        widths = [config.base_channels * 2 ** i for i in range(L)]
        bott = config.base_channels * 2 ** L

        self.enc_blocks = []
        c_prev = config.input_channels
        for i, width in enumerate(widths):
            block = {
                "conv1": _Conv(f"enc{i}.conv1", c_prev, width, rng, dtype),
                "norm1": norm(f"enc{i}.norm1", width),
                "conv2": _Conv(f"enc{i}.conv2", width, width, rng, dtype),
                "norm2": norm(f"enc{i}.norm2", width),
            }
            nxt = widths[i + 1] if i + 1 < L else bott
            block["down"] = _Conv(f"down{i}.conv", width, nxt, rng, dtype, stride=2)
            block["down_norm"] = norm(f"down{i}.norm", nxt)
            self.enc_blocks.append(block)
            c_prev = nxt

        self.bottleneck = {
            "conv1": _Conv("bottleneck.conv1", bott, bott, rng, dtype),
            "norm1": norm("bottleneck.norm1", bott),
            "conv2": _Conv("bottleneck.conv2", bott, bott, rng, dtype),
            "norm2": norm("bottleneck.norm2", bott),
        }

        self.dec_blocks = []
        upper = bott
        for i in reversed(range(L)):
            width = widths[i]
            self.dec_blocks.append(
                {
                    "up_conv": _Conv(f"dec{i}.up_conv", upper, width, rng, dtype),
                    "up_norm": norm(f"dec{i}.up_norm", width),
                    "merge_conv": _Conv(f"dec{i}.merge_conv", 2 * width, width, rng, dtype),
                    "merge_norm": norm(f"dec{i}.merge_norm", width),
                }
            )
            upper = width

        self.out_conv = _Conv("out.conv", widths[0], OUTPUT_CHANNELS, rng, dtype)
        self._enc_cache: dict[tuple[int, int], np.ndarray] = {}

    # -- parameters ---------------------------------------------------------

    def parameters(self) -> list[ad.Parameter]:
        params: list[ad.Parameter] = []
        if self.mapping is not None:
            params += self.mapping.parameters()
        for block in self.enc_blocks:
            for key in ("conv1", "norm1", "conv2", "norm2", "down", "down_norm"):
                params += block[key].parameters()
        for key in ("conv1", "norm1", "conv2", "norm2"):
            params += self.bottleneck[key].parameters()
        for block in self.dec_blocks:
            for key in ("up_conv", "up_norm", "merge_conv", "merge_norm"):
                params += block[key].parameters()
        params += self.out_conv.parameters()
        return params

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    # -- forward ------------------------------------------------------------

    def _input_planes(self, z: np.ndarray, s: np.ndarray) -> np.ndarray:
        b, _, h, w = z.shape
        planes = [z]
        if self.config.encoding_enabled:
            key = (w, h)
            if key not in self._enc_cache:
                self._enc_cache[key] = fenc.encode(w, h, self.encoding)
            planes.append(np.broadcast_to(self._enc_cache[key][None], (b, fenc.CHANNELS, h, w)))
        if self.config.settings_mode == "feature_append":
            planes.append(np.broadcast_to(s[:, :, None, None], (b, s.shape[1], h, w)))
        return np.concatenate([np.ascontiguousarray(p, dtype=z.dtype) for p in planes], axis=1)

    def forward_batch(
        self,
        z: np.ndarray,
        s: np.ndarray,
        capture_normalized: list | None = None,
    ) -> ad.Tensor:
        """Run a (B, 1, H, W) z-buffer batch with per-sample settings (B, len).

        H and W must be divisible by 2**levels. Returns a (B, 4, H, W)
        tensor in [0, 1]; record on a GradTape to train.
        """
        z = np.asarray(z, dtype=np.float32)
        s = np.asarray(s, dtype=np.float32)
        if z.ndim != 4 or z.shape[1] != 1:
            raise ValueError(f"expected z of shape (B, 1, H, W), got {z.shape}")
        if s.ndim != 2 or s.shape[0] != z.shape[0] or s.shape[1] != self.config.settings_length:
            raise ValueError(
                f"expected settings of shape ({z.shape[0]}, {self.config.settings_length}), got {s.shape}"
            )
        h, w = z.shape[2:]
        div = self.config.size_divisor
        if h % div or w % div:
            raise ValueError(f"spatial size {h}x{w} not divisible by 2^levels = {div}")

        x = ad.Tensor(self._input_planes(z, s))
        style = self.mapping(ad.Tensor(s)) if self.mapping is not None else None

        def act(t):
            return ad.leaky_relu(t, LEAKY_SLOPE)

        skips = []
        for block in self.enc_blocks:
            x = act(block["norm1"](block["conv1"](x), style, capture_normalized))
            x = act(block["norm2"](block["conv2"](x), style, capture_normalized))
            skips.append(x)
            x = act(block["down_norm"](block["down"](x), style, capture_normalized))

        x = act(self.bottleneck["norm1"](self.bottleneck["conv1"](x), style, capture_normalized))
        x = act(self.bottleneck["norm2"](self.bottleneck["conv2"](x), style, capture_normalized))

        for block, skip in zip(self.dec_blocks, reversed(skips)):
            x = ad.upsample2x(x)
            x = act(block["up_norm"](block["up_conv"](x), style, capture_normalized))
            x = ad.concat([x, skip], axis=1)
            x = act(block["merge_norm"](block["merge_conv"](x), style, capture_normalized))

        return ad.sigmoid(self.out_conv(x))

    def render(self, zimg: ZBufferImage | np.ndarray, settings: Settings) -> np.ndarray:
        """Single-image inference; returns (4, H, W) float32 in [0, 1]."""
        grid = zimg.intensities if isinstance(zimg, ZBufferImage) else np.asarray(zimg)
        vec = settings.vector()
        if vec.shape[0] != self.config.settings_length:
            raise ValueError(
                f"settings length {vec.shape[0]} does not match model ({self.config.settings_length})"
            )
        out = self.forward_batch(grid[None, None], vec[None, :])
        return out.data[0]


def forward(z: ZBufferImage, s: Settings, model: RenderModel) -> np.ndarray:
    """Full conditioned forward pass; returns the (4, H, W) RGBA image."""
    return model.render(z, s)
