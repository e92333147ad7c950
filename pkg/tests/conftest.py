import numpy as np
import pytest

from pointshade import autodiff as ad
from pointshade.network import RenderModel, UNetConfig


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def tiny_model():
    """Smallest useful network; fast enough for per-test instantiation."""
    return RenderModel(UNetConfig(levels=1, base_channels=4), init_seed=3)


def interior_shift_deviation(model, z, settings_vec, shift, margin):
    """Max interior deviation between forward(shift(z)) and shift(forward(z)).

    ``z`` must be zero within ``shift`` of its borders so np.roll is an
    exact translation; ``margin`` pixels are cropped on every side before
    comparing, which keeps border effects out of the measurement.
    """
    dy, dx = shift
    zs = np.roll(np.roll(z, dy, axis=0), dx, axis=1)
    out = model.forward_batch(z[None, None], settings_vec[None]).data[0]
    out_s = model.forward_batch(zs[None, None], settings_vec[None]).data[0]
    expected = np.roll(np.roll(out, dy, axis=1), dx, axis=2)
    h, w = z.shape
    crop = (slice(None), slice(margin, h - margin), slice(margin, w - margin))
    return float(np.abs(out_s[crop] - expected[crop]).max())


def finite_difference_check(fn, params, h=1e-5, indices=None):
    """Max relative error between tape gradients and central differences.

    ``fn`` rebuilds the scalar loss from the current parameter values; it is
    evaluated without a tape for the numeric probes. ``indices`` restricts
    the probe to a subset of flat positions per parameter (all by default).
    """
    for p in params:
        p.zero_grad()
    with ad.GradTape() as tape:
        loss = fn()
    tape.backward(loss)

    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        grad = p.grad.reshape(-1)
        probe = range(flat.size) if indices is None else indices(flat.size)
        for i in probe:
            orig = flat[i]
            flat[i] = orig + h
            lp = float(fn().data)
            flat[i] = orig - h
            lm = float(fn().data)
            flat[i] = orig
            fd = (lp - lm) / (2.0 * h)
            err = abs(fd - grad[i]) / max(abs(fd), abs(grad[i]), 1e-6)
            worst = max(worst, err)
    return worst
