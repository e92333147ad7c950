"""Random Fourier positional features appended to the network input.

Ten frequencies drawn once from U[0, 10) produce 40 per-pixel channels
(sin/cos of scaled normalized coordinates). They break the convolutional
translation symmetry so shading can depend on absolute image position;
the frequencies are frozen after sampling and travel with the weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NUM_FREQUENCIES = 10
CHANNELS = 4 * NUM_FREQUENCIES
FREQUENCY_RANGE = 10.0


@dataclass(frozen=True)
class FourierEncoding:
    frequencies: np.ndarray  # (10,) float64 in [0, 10)
    seed: int

    def __post_init__(self):
        freqs = np.asarray(self.frequencies, dtype=np.float64)
        if freqs.shape != (NUM_FREQUENCIES,):
            raise ValueError(f"expected {NUM_FREQUENCIES} frequencies, got {freqs.shape}")
        object.__setattr__(self, "frequencies", freqs)


def sample_frequencies(seed: int) -> FourierEncoding:
    """Draw the ten frequencies, reproducibly, from U[0, 10)."""
    rng = np.random.default_rng(seed)
    return FourierEncoding(frequencies=rng.uniform(0.0, FREQUENCY_RANGE, NUM_FREQUENCIES), seed=seed)


def encode(width: int, height: int, enc: FourierEncoding) -> np.ndarray:
    """Per-pixel features, shape (40, H, W) float32.

    Channel order: [sin(w_j*u)]_j, [sin(w_j*v)]_j, [cos(w_j*u)]_j,
    [cos(w_j*v)]_j with u = x/(W-1), v = y/(H-1) in [0, 1] (a single-pixel
    axis maps to 0). The order is frozen into the weights file.
    """
    if width < 1 or height < 1:
        raise ValueError("width and height must be >= 1")
    u = np.linspace(0.0, 1.0, width) if width > 1 else np.zeros(1)
    v = np.linspace(0.0, 1.0, height) if height > 1 else np.zeros(1)
    wu = enc.frequencies[:, None] * u[None, :]  # (10, W)
    wv = enc.frequencies[:, None] * v[None, :]  # (10, H)

    out = np.empty((CHANNELS, height, width), dtype=np.float32)
    out[0:10] = np.broadcast_to(np.sin(wu)[:, None, :], (10, height, width))
    out[10:20] = np.broadcast_to(np.sin(wv)[:, :, None], (10, height, width))
    out[20:30] = np.broadcast_to(np.cos(wu)[:, None, :], (10, height, width))
    out[30:40] = np.broadcast_to(np.cos(wv)[:, :, None], (10, height, width))
    return out
