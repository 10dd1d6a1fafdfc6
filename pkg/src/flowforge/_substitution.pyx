# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled substitution kernel: raster-order triangular solve for masked
convolutions, parallelized across the batch with OpenMP.

Mirrors _substitution_py.solve_masked exactly; taps must be pre-masked.
"""

import numpy as np

cimport numpy as cnp
from cython.parallel cimport prange

cnp.import_array()


cdef void _solve_one(double[:, :, ::1] x, const double[:, :, ::1] z,
                     const double[:, :, :, ::1] taps,
                     int pad_top, int pad_left, bint lower,
                     int c, int h, int w, int kh, int kw) noexcept nogil:
    cdef int j, i, co, ci, dy, dx, y0, x0, sj, si, sc
    cdef double acc
    for sj in range(h):
        j = sj if lower else h - 1 - sj
        for si in range(w):
            i = si if lower else w - 1 - si
            for sc in range(c):
                co = sc if lower else c - 1 - sc
                acc = z[co, j, i]
                for dy in range(kh):
                    y0 = j + dy - pad_top
                    if y0 < 0 or y0 >= h:
                        continue
                    for dx in range(kw):
                        x0 = i + dx - pad_left
                        if x0 < 0 or x0 >= w:
                            continue
                        if y0 == j and x0 == i:
                            # center position: previously solved channels only
                            for ci in range(c):
                                if ci != co:
                                    acc -= taps[co, ci, dy, dx] * x[ci, y0, x0]
                        else:
                            for ci in range(c):
                                acc -= taps[co, ci, dy, dx] * x[ci, y0, x0]
                x[co, j, i] = acc / taps[co, co, pad_top, pad_left]


def solve_masked(double[:, :, :, ::1] z, double[:, :, :, ::1] taps,
                 int pad_top, int pad_left, bint lower, int workers):
    cdef int n = z.shape[0]
    cdef int c = z.shape[1]
    cdef int h = z.shape[2]
    cdef int w = z.shape[3]
    cdef int kh = taps.shape[2]
    cdef int kw = taps.shape[3]
    out = np.zeros((n, c, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] x = out
    cdef int b
    if workers > 1 and n > 1:
        for b in prange(n, nogil=True, num_threads=workers, schedule="static"):
            _solve_one(x[b], z[b], taps, pad_top, pad_left, lower, c, h, w, kh, kw)
    else:
        with nogil:
            for b in range(n):
                _solve_one(x[b], z[b], taps, pad_top, pad_left, lower, c, h, w, kh, kw)
    return out
