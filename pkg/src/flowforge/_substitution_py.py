"""Pure-numpy substitution kernel, the fallback when the compiled
extension is unavailable.

Traverses output pixels in raster order and solves the whole batch at each
position with vectorized gathers; the sequential structure is over pixels,
not examples. Taps must be pre-masked (zeros outside the autoregressive
pattern).
"""

import numpy as np


def solve_masked(z, taps, pad_top, pad_left, lower, workers):
    n, c, h, w = z.shape
    kh, kw = taps.shape[2], taps.shape[3]
    x = np.zeros_like(z)
    center = taps[:, :, pad_top, pad_left]
    diag = np.diagonal(center)
    rows = range(h) if lower else range(h - 1, -1, -1)
    cols_template = range(w) if lower else range(w - 1, -1, -1)
    chans = range(c) if lower else range(c - 1, -1, -1)
    for j in rows:
        for i in cols_template:
            acc = z[:, :, j, i].copy()
            for dy in range(kh):
                y0 = j + dy - pad_top
                if y0 < 0 or y0 >= h:
                    continue
                for dx in range(kw):
                    x0 = i + dx - pad_left
                    if x0 < 0 or x0 >= w or (y0 == j and x0 == i):
                        continue
                    acc -= x[:, :, y0, x0] @ taps[:, :, dy, dx].T
            pix = x[:, :, j, i]
            for co in chans:
                pix[:, co] = (acc[:, co] - pix @ center[co]) / diag[co]
    return x
