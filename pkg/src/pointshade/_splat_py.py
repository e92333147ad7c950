"""Pure-numpy z-buffer scatter, the fallback when the extension is absent.

Expands every point into its window x window footprint, then resolves each
pixel with a stable lexsort keyed (pixel, depth, point index): the first
row per pixel is the nearest point, ties going to the lowest index. That
is exactly the strict less-than update order of the compiled kernel, so
both backends are bit-identical.
"""

import numpy as np


def scatter_splats(us, vs, depths, intensities, height, width, window):
    """Return (H, W) float32 intensity image; uncovered pixels stay 0."""
    out = np.zeros((height, width), dtype=np.float32)
    n = us.shape[0]
    if n == 0:
        return out
    r = window // 2
    offs = np.arange(-r, r + 1, dtype=np.int32)
    gy, gx = np.meshgrid(offs, offs, indexing="ij")
    xs = (us[:, None] + gx.ravel()[None, :]).ravel()
    ys = (vs[:, None] + gy.ravel()[None, :]).ravel()
    per = window * window
    d = np.repeat(depths, per)
    inten = np.repeat(intensities, per)
    idx = np.repeat(np.arange(n, dtype=np.int64), per)

    keep = (xs >= 0) & (xs < width) & (ys >= 0) & (ys < height)
    if not keep.any():
        return out
    xs, ys, d, inten, idx = xs[keep], ys[keep], d[keep], inten[keep], idx[keep]

    flat = ys.astype(np.int64) * width + xs
    order = np.lexsort((idx, d, flat))
    flat = flat[order]
    first = np.ones(flat.shape[0], dtype=bool)
    first[1:] = flat[1:] != flat[:-1]
    out.ravel()[flat[first]] = inten[order][first]
    return out
