"""Minimal reverse-mode differentiation over the tensor operations the
flow layers use.

Values are computed eagerly; a Tape records one node per operation and a
single backward pass accumulates gradients for every requires-grad
Variable. Log-determinant gradients use analytic rules (inverse-transpose
identities) instead of differentiating through pivoted factorizations.
"""

import itertools

import numpy as np

from . import convkit, numerics

_ids = itertools.count()


class Variable:
    """A tensor (or matrix/vector/scalar) tracked by the tape."""

    __slots__ = ("id", "value", "grad", "requires_grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: str = ""):
        self.id = next(_ids)
        self.value = np.asarray(value, dtype=complex if np.iscomplexobj(value) else float)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Variable(id={self.id}, shape={self.value.shape}, name={self.name!r})"


class _Node:
    __slots__ = ("op", "inputs", "output", "ctx")

    def __init__(self, op, inputs, output, ctx):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.ctx = ctx


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to the shape of a broadcast operand."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _batch_dft2(x: np.ndarray, inverse: bool) -> np.ndarray:
    h, w = x.shape[-2], x.shape[-1]
    fh, fw = numerics.dft_matrix(h), numerics.dft_matrix(w)
    if inverse:
        fh, fw = fh.conj() / h, fw.conj() / w
    return np.einsum("uy,...yx,vx->...uv", fh, x, fw)


def periodic_spectrum(taps: np.ndarray, h: int, w: int, center: tuple) -> np.ndarray:
    """Per-frequency channel matrices What[u, v] of a wrap-around convolution.

    Each filter is reflected and embedded at wrapped coordinates into an
    h x w plane, then transformed; What[u, v] is c_out x c_in. Taps whose
    wrapped positions collide (kernel larger than the plane) accumulate.
    """
    c_out, c_in, kh, kw = taps.shape
    my, mx = center
    planes = np.zeros((c_out, c_in, h, w))
    for dy in range(kh):
        for dx in range(kw):
            planes[:, :, (my - dy) % h, (mx - dx) % w] += taps[:, :, dy, dx]
    spec = _batch_dft2(planes, inverse=False)
    return np.moveaxis(spec, (2, 3), (0, 1))  # (h, w, c_out, c_in)


def periodic_logdet_value(taps: np.ndarray, h: int, w: int, center: tuple) -> float:
    """Sum over frequencies of log|det What_uv|; -inf when any is singular."""
    what = periodic_spectrum(taps, h, w, center)
    total = 0.0
    for u in range(h):
        for v in range(w):
            _, ld = numerics.lu_slogdet(what[u, v])
            if not np.isfinite(ld):
                return -np.inf
            total += ld
    return total


def _phase_tables(kh: int, kw: int, h: int, w: int, center: tuple):
    my, mx = center
    u = np.arange(h)[:, None]
    v = np.arange(w)[:, None]
    py = np.exp(-2j * np.pi * u * ((my - np.arange(kh)[None, :]) / h))
    px = np.exp(-2j * np.pi * v * ((mx - np.arange(kw)[None, :]) / w))
    return py, px


# Each op: forward(ctx, *values) -> value, backward(ctx, g) -> per-input grads.


def _fw_conv2d(ctx, x, taps):
    f = convkit.Filter(taps, ctx["pad"])
    ctx["x"], ctx["f"] = x, f
    return convkit.conv2d(x, f, ctx["boundary"])


def _bw_conv2d(ctx, g):
    gx = convkit.conv2d_grad_input(g, ctx["f"], ctx["x"].shape, ctx["boundary"])
    gt = convkit.conv2d_grad_filter(g, ctx["x"], ctx["f"], ctx["boundary"])
    return gx, gt


def _fw_pixel_matmul(ctx, w, x):
    ctx["w"], ctx["x"] = w, x
    return np.einsum("oc,nchw->nohw", w, x)


def _bw_pixel_matmul(ctx, g):
    gw = np.einsum("nohw,nchw->oc", g, ctx["x"])
    gx = np.einsum("oc,nohw->nchw", ctx["w"].T, g)
    return gw, gx


def _fw_affine_channels(ctx, x, scale, bias):
    ctx["x"], ctx["scale"] = x, scale
    return x * scale[None, :, None, None] + bias[None, :, None, None]


def _bw_affine_channels(ctx, g):
    gx = g * ctx["scale"][None, :, None, None]
    gs = np.einsum("nchw,nchw->c", g, ctx["x"])
    gb = g.sum(axis=(0, 2, 3))
    return gx, gs, gb


def _fw_logabs_entries(ctx, w):
    idx = ctx["indices"]
    vals = np.array([w[i] for i in idx])
    ctx["vals"] = vals
    return np.sum(np.log(np.abs(vals)))


def _bw_logabs_entries(ctx, g):
    gw = np.zeros(ctx["shapes"][0])
    for i, pos in enumerate(ctx["indices"]):
        gw[pos] += g / ctx["vals"][i]
    return (gw,)


def _fw_logdet(ctx, m):
    ctx["m"] = m
    _, ld = numerics.lu_slogdet(m)
    return ld


def _bw_logdet(ctx, g):
    return (g * np.linalg.inv(ctx["m"]).T,)


def _fw_periodic_logdet(ctx, taps):
    ctx["taps"] = taps
    return periodic_logdet_value(taps, ctx["h"], ctx["w"], ctx["center"])


def _bw_periodic_logdet(ctx, g):
    taps = ctx["taps"]
    h, w = ctx["h"], ctx["w"]
    what = periodic_spectrum(taps, h, w, ctx["center"])
    inv_t = np.linalg.inv(what).transpose(0, 1, 3, 2)  # (h, w, c_out, c_in)
    py, px = _phase_tables(taps.shape[2], taps.shape[3], h, w, ctx["center"])
    grad = np.einsum("uvoi,uy,vx->oiyx", inv_t, py, px).real
    return (g * grad,)


def _fw_dft(ctx, x):
    ctx["real_input"] = not np.iscomplexobj(x)
    ctx["hw"] = x.shape[-2] * x.shape[-1]
    return _batch_dft2(x, ctx["inverse"])


def _bw_dft(ctx, g):
    if ctx["inverse"]:
        gx = _batch_dft2(np.asarray(g, complex), inverse=False) / ctx["hw"]
    else:
        gx = _batch_dft2(np.asarray(g, complex), inverse=True) * ctx["hw"]
    return (gx.real if ctx["real_input"] else gx,)


def _fw_squeeze(ctx, x):
    if ctx["inverse"]:
        return unsqueeze2(x)
    return squeeze2(x)


def _bw_squeeze(ctx, g):
    return (squeeze2(g) if ctx["inverse"] else unsqueeze2(g),)


def squeeze2(x: np.ndarray) -> np.ndarray:
    """2x2 space-to-depth, channel-major tap order TL, TR, BL, BR."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"squeeze needs even spatial dims, got {h}x{w}")
    y = x.reshape(n, c, h // 2, 2, w // 2, 2)
    y = y.transpose(0, 1, 3, 5, 2, 4)
    return np.ascontiguousarray(y.reshape(n, 4 * c, h // 2, w // 2))


def unsqueeze2(y: np.ndarray) -> np.ndarray:
    n, c4, h2, w2 = y.shape
    if c4 % 4:
        raise ValueError(f"unsqueeze needs channels divisible by 4, got {c4}")
    x = y.reshape(n, c4 // 4, 2, 2, h2, w2)
    x = x.transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(x.reshape(n, c4 // 4, 2 * h2, 2 * w2))


def _fw_add(ctx, a, b):
    return a + b


def _bw_add(ctx, g):
    return _unbroadcast(g, ctx["shapes"][0]), _unbroadcast(g, ctx["shapes"][1])


def _fw_mul(ctx, a, b):
    ctx["ab"] = (a, b)
    return a * b


def _bw_mul(ctx, g):
    a, b = ctx["ab"]
    return (
        _unbroadcast(g * np.conj(b), ctx["shapes"][0]),
        _unbroadcast(g * np.conj(a), ctx["shapes"][1]),
    )


def _fw_div(ctx, a, b):
    ctx["ab"] = (a, b)
    return a / b


def _bw_div(ctx, g):
    a, b = ctx["ab"]
    return (
        _unbroadcast(g / np.conj(b), ctx["shapes"][0]),
        _unbroadcast(-g * np.conj(a) / np.conj(b) ** 2, ctx["shapes"][1]),
    )


def _fw_exp(ctx, a):
    ctx["y"] = np.exp(a)
    return ctx["y"]


def _fw_log(ctx, a):
    ctx["a"] = a
    return np.log(a)


def _fw_sigmoid(ctx, a):
    ctx["y"] = 1.0 / (1.0 + np.exp(-a))
    return ctx["y"]


def _fw_abs2(ctx, a):
    ctx["a"] = a
    return (a * np.conj(a)).real


def _fw_sum(ctx, a):
    return np.sum(a, axis=ctx["axis"])


def _bw_sum(ctx, g):
    shape = ctx["shapes"][0]
    axis = ctx["axis"]
    if axis is None:
        return (np.broadcast_to(g, shape).copy(),)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    g = np.asarray(g)
    expand = list(g.shape)
    for ax in sorted(a % len(shape) for a in axes):
        expand.insert(ax, 1)
    return (np.broadcast_to(g.reshape(expand), shape).copy(),)


def _fw_matmul(ctx, a, b):
    ctx["ab"] = (a, b)
    return a @ b


def _bw_matmul(ctx, g):
    a, b = ctx["ab"]
    return g @ np.conj(b).T, np.conj(a).T @ g


def _bw_slice(ctx, g):
    gx = np.zeros(ctx["shapes"][0])
    gx[:, ctx["lo"] : ctx["hi"]] = g
    return (gx,)


def _bw_concat(ctx, g):
    c0 = ctx["shapes"][0][1]
    return (g[:, :c0], g[:, c0:])


_OPS = {
    "add": (_fw_add, _bw_add),
    "mul": (_fw_mul, _bw_mul),
    "div": (_fw_div, _bw_div),
    "exp": (_fw_exp, lambda ctx, g: (g * ctx["y"],)),
    "log": (_fw_log, lambda ctx, g: (g / ctx["a"],)),
    "sigmoid": (_fw_sigmoid, lambda ctx, g: (g * ctx["y"] * (1.0 - ctx["y"]),)),
    "abs2": (_fw_abs2, lambda ctx, g: (2.0 * g * ctx["a"],)),
    "sum": (_fw_sum, _bw_sum),
    "reshape": (
        lambda ctx, a: a.reshape(ctx["shape"]),
        lambda ctx, g: (g.reshape(ctx["shapes"][0]),),
    ),
    "matmul": (_fw_matmul, _bw_matmul),
    "slice-channels": (lambda ctx, a: a[:, ctx["lo"] : ctx["hi"]], _bw_slice),
    "concat-channels": (lambda ctx, a, b: np.concatenate([a, b], axis=1), _bw_concat),
    "conv2d": (_fw_conv2d, _bw_conv2d),
    "matmul-per-pixel": (_fw_pixel_matmul, _bw_pixel_matmul),
    "affine-per-channel": (_fw_affine_channels, _bw_affine_channels),
    "logabs-of-selected-entries": (_fw_logabs_entries, _bw_logabs_entries),
    "logdet": (_fw_logdet, _bw_logdet),
    "periodic-logdet": (_fw_periodic_logdet, _bw_periodic_logdet),
    "dft-linear-map": (_fw_dft, _bw_dft),
    "squeeze2x2": (_fw_squeeze, _bw_squeeze),
}


class Tape:
    """Ordered record of operations; single-owner, one backward per recording."""

    def __init__(self):
        self.nodes = []
        self._produced = set()

    def record(self, op: str, inputs, **params) -> Variable:
        if op not in _OPS:
            raise ValueError(f"unsupported op kind {op!r}")
        fw, _ = _OPS[op]
        vars_in = tuple(v if isinstance(v, Variable) else None for v in inputs)
        values = tuple(v.value if isinstance(v, Variable) else np.asarray(v, float) for v in inputs)
        ctx = dict(params)
        ctx["shapes"] = tuple(v.shape for v in values)
        out = Variable(fw(ctx, *values))
        self.nodes.append(_Node(op, vars_in, out, ctx))
        self._produced.add(out.id)
        return out

    # Convenience wrappers; all route through record().

    def add(self, a, b):
        return self.record("add", (a, b))

    def sub(self, a, b):
        return self.add(a, self.mul(b, -1.0))

    def mul(self, a, b):
        return self.record("mul", (a, b))

    def div(self, a, b):
        return self.record("div", (a, b))

    def exp(self, a):
        return self.record("exp", (a,))

    def log(self, a):
        return self.record("log", (a,))

    def sigmoid(self, a):
        return self.record("sigmoid", (a,))

    def abs2(self, a):
        return self.record("abs2", (a,))

    def sum(self, a, axis=None):
        return self.record("sum", (a,), axis=axis)

    def reshape(self, a, shape):
        return self.record("reshape", (a,), shape=shape)

    def matmul(self, a, b):
        return self.record("matmul", (a, b))

    def conv2d(self, x, taps, pad, boundary=convkit.ZERO):
        return self.record("conv2d", (x, taps), pad=pad, boundary=boundary)

    def matmul_per_pixel(self, w, x):
        return self.record("matmul-per-pixel", (w, x))

    def affine_per_channel(self, x, scale, bias):
        return self.record("affine-per-channel", (x, scale, bias))

    def logabs_entries(self, w, indices):
        return self.record("logabs-of-selected-entries", (w,), indices=indices)

    def logdet(self, m):
        return self.record("logdet", (m,))

    def periodic_logdet(self, taps, h, w, center):
        return self.record("periodic-logdet", (taps,), h=h, w=w, center=center)

    def dft2(self, x):
        return self.record("dft-linear-map", (x,), inverse=False)

    def idft2(self, x):
        return self.record("dft-linear-map", (x,), inverse=True)

    def squeeze(self, x, inverse=False):
        return self.record("squeeze2x2", (x,), inverse=inverse)

    def slice_channels(self, x, lo, hi):
        return self.record("slice-channels", (x,), lo=lo, hi=hi)

    def concat_channels(self, a, b):
        return self.record("concat-channels", (a, b))

    def silu(self, a):
        return self.mul(a, self.sigmoid(a))


def backward(tape: Tape, loss: Variable) -> dict:
    """Accumulate d loss / d v for every requires-grad Variable on the tape.

    Returns a map {Variable: gradient array}; gradients are also added into
    each Variable's .grad accumulator.
    """
    if loss.value.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.value.shape}")
    if loss.id not in tape._produced:
        raise ValueError("loss is detached: it was not produced on this tape")
    grads = {loss.id: np.ones_like(loss.value)}
    result = {}
    for node in reversed(tape.nodes):
        g = grads.pop(node.output.id, None)
        if g is None:
            continue
        _, bw = _OPS[node.op]
        in_grads = bw(node.ctx, g)
        for var, gi in zip(node.inputs, in_grads):
            if var is None or gi is None:
                continue
            if var.id in grads:
                grads[var.id] = grads[var.id] + gi
            else:
                grads[var.id] = gi
            if var.requires_grad:
                result[var] = grads[var.id]
    for var, g in result.items():
        var.grad = g if var.grad is None else var.grad + g
    return result


def grad_check(build, params, step: float = 1e-5, floor: float = 1e-6) -> float:
    """Worst-case relative error of tape gradients vs central differences.

    ``build`` must be a deterministic zero-argument callable returning
    (tape, scalar loss Variable). Each parameter coordinate is perturbed by
    +-step; errors are measured relative to max(|fd|, floor).
    """
    for p in params:
        p.zero_grad()
    tape, loss = build()
    backward(tape, loss)
    analytic = [np.zeros_like(p.value) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, ana in zip(params, analytic):
        flat = p.value.reshape(-1)
        ana_flat = ana.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            f_plus = float(build()[1].value)
            flat[k] = orig - step
            f_minus = float(build()[1].value)
            flat[k] = orig
            fd = (f_plus - f_minus) / (2.0 * step)
            err = abs(ana_flat[k] - fd) / max(abs(fd), floor)
            worst = max(worst, err)
    return worst
