"""Convolution kernels, autoregressive masks, filter composition and the
dense-matrix expansion oracle.

A convolution layer here is an aggregation of cross-correlations: taps are
applied as z[n,co,j,i] = sum_{ci,dy,dx} taps[co,ci,dy,dx] * x[n,ci,j+dy-pt,i+dx-pl]
with zero or wrap-around boundary handling. Signals vectorize in raster
order t = c + n_c*i + (n_c*w)*j; every triangularity statement below is
relative to that order.

The batched substitution inverse dispatches to a compiled kernel when the
extension built, with a vectorized numpy fallback otherwise.
"""

import os
from dataclasses import dataclass
from enum import Enum

import numpy as np

ZERO = "zero"
WRAP = "wrap"

DIAG_TOL = 1e-12


class MaskVariant(Enum):
    LOWER = "lower"
    UPPER = "upper"


class NonInvertibleFilterError(ValueError):
    """A masked filter has a vanishing center diagonal tap."""

    def __init__(self, channel: int, value: float):
        self.channel = channel
        super().__init__(
            f"autoregressive filter is not invertible: center diagonal tap of "
            f"channel {channel} is {value:.3e}"
        )


@dataclass(frozen=True)
class Filter:
    """Convolution filter: taps (c_out, c_in, kh, kw) plus zero-padding spec.

    pad = (top, bottom, left, right) must preserve spatial size, i.e.
    top+bottom == kh-1 and left+right == kw-1. The output pixel aligns with
    tap (top, left), the filter's center index.
    """

    taps: np.ndarray
    pad: tuple

    def __post_init__(self):
        taps = np.asarray(self.taps, dtype=float)
        object.__setattr__(self, "taps", taps)
        if taps.ndim != 4:
            raise ValueError(f"filter taps must be rank 4, got shape {taps.shape}")
        pt, pb, pl, pr = self.pad
        _, _, kh, kw = taps.shape
        if pt + pb != kh - 1 or pl + pr != kw - 1:
            raise ValueError(
                f"padding {self.pad} inconsistent with kernel extents {kh}x{kw}"
            )

    @property
    def c_out(self):
        return self.taps.shape[0]

    @property
    def c_in(self):
        return self.taps.shape[1]

    @property
    def center(self):
        """(m_y, m_x): the tap index aligned with the output pixel."""
        return (self.pad[0], self.pad[2])

    def center_diagonal(self) -> np.ndarray:
        my, mx = self.center
        return np.diagonal(self.taps[:, :, my, mx]).copy()


def centered(taps: np.ndarray) -> Filter:
    """Filter with symmetric padding; kernel extents must be odd."""
    taps = np.asarray(taps, dtype=float)
    kh, kw = taps.shape[2], taps.shape[3]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"centered filter needs odd extents, got {kh}x{kw}")
    return Filter(taps, (kh // 2, kh // 2, kw // 2, kw // 2))


def identity_filter(c: int) -> Filter:
    """1x1 delta filter: conv2d(x, identity_filter(c)) == x."""
    return Filter(np.eye(c).reshape(c, c, 1, 1), (0, 0, 0, 0))


def as_1x1(matrix: np.ndarray) -> Filter:
    m = np.asarray(matrix, dtype=float)
    return Filter(m.reshape(*m.shape, 1, 1), (0, 0, 0, 0))


def _padded(x: np.ndarray, pad: tuple, boundary: str) -> np.ndarray:
    pt, pb, pl, pr = pad
    n, c, h, w = x.shape
    if boundary == ZERO:
        out = np.zeros((n, c, h + pt + pb, w + pl + pr), dtype=x.dtype)
        out[:, :, pt : pt + h, pl : pl + w] = x
        return out
    if boundary == WRAP:
        rows = np.arange(-pt, h + pb) % h
        cols = np.arange(-pl, w + pr) % w
        return x[:, :, rows][:, :, :, cols]
    raise ValueError(f"unknown boundary {boundary!r}")


def _windows(xp: np.ndarray, kh: int, kw: int, h: int, w: int) -> np.ndarray:
    """View of all kernel-offset slices, shape (n, c, kh, kw, h, w)."""
    view = np.lib.stride_tricks.sliding_window_view(xp, (h, w), axis=(2, 3))
    return view  # already (n, c, kh, kw, h, w) for size-preserving padding


def conv2d(x: np.ndarray, f: Filter, boundary: str = ZERO) -> np.ndarray:
    """Size-preserving convolution layer (cross-correlation aggregation)."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 4:
        raise ValueError(f"input must be rank 4 (n, c, h, w), got {x.shape}")
    if f.c_in != x.shape[1]:
        raise ValueError(f"channel mismatch: filter eats {f.c_in}, input has {x.shape[1]}")
    n, c, h, w = x.shape
    kh, kw = f.taps.shape[2], f.taps.shape[3]
    xp = _padded(x, f.pad, boundary)
    win = _windows(xp, kh, kw, h, w)
    out = np.tensordot(f.taps, win, axes=([1, 2, 3], [1, 2, 3]))
    return np.ascontiguousarray(np.moveaxis(out, 1, 0))


def conv2d_grad_filter(gy: np.ndarray, x: np.ndarray, f: Filter, boundary: str) -> np.ndarray:
    """d(sum(gy * conv2d(x, f)))/d taps, shape like f.taps."""
    n, c, h, w = x.shape
    kh, kw = f.taps.shape[2], f.taps.shape[3]
    xp = _padded(np.asarray(x, float), f.pad, boundary)
    win = _windows(xp, kh, kw, h, w)
    return np.tensordot(gy, win, axes=([0, 2, 3], [0, 4, 5]))


def conv2d_grad_input(gy: np.ndarray, f: Filter, x_shape: tuple, boundary: str) -> np.ndarray:
    """d(sum(gy * conv2d(x, f)))/d x, shape x_shape."""
    n, c, h, w = x_shape
    pt, pb, pl, pr = f.pad
    kh, kw = f.taps.shape[2], f.taps.shape[3]
    gxp = np.zeros((n, c, h + pt + pb, w + pl + pr))
    for dy in range(kh):
        for dx in range(kw):
            gxp[:, :, dy : dy + h, dx : dx + w] += np.einsum(
                "oi,nohw->nihw", f.taps[:, :, dy, dx], gy
            )
    if boundary == ZERO:
        return gxp[:, :, pt : pt + h, pl : pl + w]
    # wrap: fold padded borders back onto their source rows/columns
    rows = np.arange(-pt, h + pb) % h
    cols = np.arange(-pl, w + pr) % w
    tmp = np.zeros((n, c, h, w + pl + pr))
    np.add.at(tmp, (slice(None), slice(None), rows), gxp)
    gx = np.zeros((n, c, h, w))
    np.add.at(gx, (slice(None), slice(None), slice(None), cols), tmp)
    return gx


def build_autoregressive_mask(variant: MaskVariant, p: int, c: int) -> Filter:
    """Binary mask enforcing the autoregressive structure for a p x p filter.

    LOWER aligns the output pixel with the bottom-right tap (pad top/left);
    every tap references earlier raster positions, so full channel blocks
    are allowed except at the center, where the block is lower-triangular
    (diagonal included). UPPER is the mirror image.
    """
    if p < 1 or c < 1:
        raise ValueError("kernel extent and channel count must be >= 1")
    mask = np.ones((c, c, p, p))
    tri = np.tril(np.ones((c, c))) if variant is MaskVariant.LOWER else np.triu(np.ones((c, c)))
    if variant is MaskVariant.LOWER:
        mask[:, :, p - 1, p - 1] = tri
        pad = (p - 1, 0, p - 1, 0)
    else:
        mask[:, :, 0, 0] = tri
        pad = (0, p - 1, 0, p - 1)
    return Filter(mask, pad)


def combine_filters(k2: Filter, k1: Filter) -> Filter:
    """Single filter equivalent to applying k1 then k2.

    conv2d(conv2d(x, k1), k2) == conv2d(x, combine_filters(k2, k1)) for all
    x, with zero boundaries wide enough for the combined support. Spatially
    this is a full convolution of the tap arrays (the time reversal of real
    signals turns chained cross-correlations into a filter-domain
    convolution); channels compose by matrix product.
    """
    if k2.c_in != k1.c_out:
        raise ValueError(f"channel mismatch: k2 eats {k2.c_in}, k1 emits {k1.c_out}")
    c2o, _, kh2, kw2 = k2.taps.shape
    _, c1i, kh1, kw1 = k1.taps.shape
    out = np.zeros((c2o, c1i, kh1 + kh2 - 1, kw1 + kw2 - 1))
    for ay in range(kh2):
        for ax in range(kw2):
            out[:, :, ay : ay + kh1, ax : ax + kw1] += np.einsum(
                "om,miyx->oiyx", k2.taps[:, :, ay, ax], k1.taps
            )
    pad = tuple(a + b for a, b in zip(k2.pad, k1.pad))
    return Filter(out, pad)


def raster_index(c: int, i: int, j: int, n_c: int, w: int) -> int:
    """Vectorization index t = c + n_c*i + (n_c*w)*j."""
    return c + n_c * i + (n_c * w) * j


def dense_operator(f: Filter, h: int, w: int, boundary: str = ZERO) -> np.ndarray:
    """Dense matrix M with vec(conv2d(x, f, boundary)) == M @ vec(x).

    Rows and columns follow raster order. Built tap-by-tap, independently
    of the windowed conv2d path, so it doubles as a verification oracle.
    """
    c_out, c_in, kh, kw = f.taps.shape
    pt, _, pl, _ = f.pad
    m = np.zeros((c_out * h * w, c_in * h * w))
    for j in range(h):
        for i in range(w):
            for dy in range(kh):
                y0 = j + dy - pt
                for dx in range(kw):
                    x0 = i + dx - pl
                    if boundary == ZERO:
                        if not (0 <= y0 < h and 0 <= x0 < w):
                            continue
                        ys, xs = y0, x0
                    else:
                        ys, xs = y0 % h, x0 % w
                    for co in range(c_out):
                        row = raster_index(co, i, j, c_out, w)
                        for ci in range(c_in):
                            col = raster_index(ci, xs, ys, c_in, w)
                            m[row, col] += f.taps[co, ci, dy, dx]
    return m


def vec(x_single: np.ndarray) -> np.ndarray:
    """Raster-order vectorization of one (c, h, w) example."""
    c, h, w = x_single.shape
    return np.transpose(x_single, (1, 2, 0)).reshape(c * h * w)


def unvec(v: np.ndarray, c: int, h: int, w: int) -> np.ndarray:
    return np.transpose(v.reshape(h, w, c), (2, 0, 1))


# Kernel backend selection: the compiled extension when it built, the
# vectorized numpy fallback otherwise. FLOWFORGE_FORCE_FALLBACK=1 skips the
# extension (useful to benchmark or test the fallback explicitly).
from . import _substitution_py as _kernel_py  # noqa: E402

if os.environ.get("FLOWFORGE_FORCE_FALLBACK", "") == "1":
    _kernel = _kernel_py
    HAVE_COMPILED_KERNEL = False
else:
    try:
        from . import _substitution as _kernel  # type: ignore

        HAVE_COMPILED_KERNEL = True
    except ImportError:
        _kernel = _kernel_py
        HAVE_COMPILED_KERNEL = False


def default_workers() -> int:
    env = os.environ.get("FLOWFORGE_WORKERS", "")
    if env:
        return max(1, int(env))
    return max(1, min(4, os.cpu_count() or 1))


def solve_autoregressive(
    z: np.ndarray,
    f: Filter,
    variant: MaskVariant,
    workers: int | None = None,
    backend=None,
) -> np.ndarray:
    """Invert a masked convolution by raster-order substitution.

    Returns x with conv2d(x, f, ZERO) == z. LOWER filters are traversed in
    ascending raster order, UPPER in descending order; examples in the
    batch are independent work items. Taps must already be masked (zeros
    outside the allowed pattern).
    """
    z = np.ascontiguousarray(z, dtype=float)
    if z.ndim != 4:
        raise ValueError(f"input must be rank 4 (n, c, h, w), got {z.shape}")
    if f.c_in != f.c_out or f.c_in != z.shape[1]:
        raise ValueError("substitution needs a square filter matching the input channels")
    diag = f.center_diagonal()
    small = np.abs(diag) <= DIAG_TOL
    if small.any():
        ch = int(np.argmax(small))
        raise NonInvertibleFilterError(ch, float(diag[ch]))
    impl = backend if backend is not None else _kernel
    nworkers = workers if workers is not None else default_workers()
    taps = np.ascontiguousarray(f.taps, dtype=float)
    pt, _, pl, _ = f.pad
    return impl.solve_masked(z, taps, pt, pl, variant is MaskVariant.LOWER, nworkers)
