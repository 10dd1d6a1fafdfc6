"""Invertible flow layers and the multi-scale model.

Every layer implements the directional contract
``apply(x, direction) -> (y, logdet)`` where logdet is the per-example
log-Jacobian of the forward map (negated for the inverse direction) and is
exact, not estimated. Forward passes run through the autodiff tape so the
same code serves density evaluation and training; inverses are dedicated
numpy routines (substitution solves, cached frequency-domain inverses).
"""

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import convkit, numerics
from .autodiff import (
    Tape,
    Variable,
    backward,
    periodic_logdet_value,
    periodic_spectrum,
    squeeze2,
    unsqueeze2,
)
from .convkit import Filter, MaskVariant

LOG2 = math.log(2.0)
LOG_2PI = math.log(2.0 * math.pi)
CONV_TYPES = ("w1x1", "plu", "qr", "emerging", "periodic")


class Direction(Enum):
    FORWARD = "forward"
    INVERSE = "inverse"


class NonInvertibleLayerError(ValueError):
    """A layer could not be inverted (singular matrix or vanishing tap)."""


class SingularFrequencyError(NonInvertibleLayerError):
    def __init__(self, u: int, v: int):
        self.u, self.v = u, v
        super().__init__(f"periodic convolution is singular at frequency (u={u}, v={v})")


@dataclass
class ModelSpec:
    """Architecture description; embedded verbatim in checkpoints."""

    levels: int
    depth: int
    width: int
    conv_type: str
    kernel: int
    img_channels: int
    img_h: int
    img_w: int
    seed: int
    num_reflections: int = 0  # 0: one reflection per channel at each site

    def __post_init__(self):
        if self.conv_type not in CONV_TYPES:
            raise ValueError(f"unknown conv type {self.conv_type!r}, expected one of {CONV_TYPES}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"kernel extent must be odd and >= 1, got {self.kernel}")
        if self.levels < 0:
            raise ValueError("levels must be >= 0")
        div = 2**self.levels
        if self.img_h % div or self.img_w % div:
            raise ValueError(
                f"image size {self.img_h}x{self.img_w} not divisible by 2^levels = {div}"
            )

    def to_lines(self) -> str:
        keys = (
            "levels depth width conv_type kernel img_channels img_h img_w seed num_reflections"
        ).split()
        return "".join(f"{k}={getattr(self, k)}\n" for k in keys)

    @classmethod
    def from_lines(cls, text: str) -> "ModelSpec":
        kv = {}
        for line in text.strip().splitlines():
            k, _, v = line.partition("=")
            kv[k] = v
        ints = {k: int(v) for k, v in kv.items() if k != "conv_type"}
        return cls(conv_type=kv["conv_type"], **ints)


def _random_rotation(c: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(c, c)))
    return q * np.sign(np.diag(r))


def _as_batch_logdet(ld, n: int) -> np.ndarray:
    return np.broadcast_to(np.asarray(ld, float), (n,)).copy()


class Actnorm:
    """Per-channel affine layer with data-dependent initialization."""

    def __init__(self, c: int, name: str = "actnorm"):
        self.c = c
        self.name = name
        self.log_scale = Variable(np.zeros(c), requires_grad=True, name=f"{name}.log_scale")
        self.bias = Variable(np.zeros(c), requires_grad=True, name=f"{name}.bias")
        self.initialized = False

    def params(self):
        return [self.log_scale, self.bias]

    def maybe_initialize(self, x: np.ndarray):
        if self.initialized:
            return
        mean = x.mean(axis=(0, 2, 3))
        std = np.maximum(x.std(axis=(0, 2, 3)), 1e-8)
        self.log_scale.value = -np.log(std)
        self.bias.value = -mean / std
        self.initialized = True

    def forward(self, tape: Tape, x: Variable):
        self.maybe_initialize(x.value)
        n, _, h, w = x.value.shape
        scale = tape.exp(self.log_scale)
        y = tape.affine_per_channel(x, scale, self.bias)
        ld = tape.mul(tape.sum(self.log_scale), float(h * w))
        return y, ld

    def inverse(self, y: np.ndarray):
        n, _, h, w = y.shape
        gamma = np.exp(self.log_scale.value)
        if not np.all(gamma > 0):
            raise NonInvertibleLayerError(f"{self.name}: zero scale channel")
        x = (y - self.bias.value[None, :, None, None]) / gamma[None, :, None, None]
        return x, float(h * w * np.sum(self.log_scale.value))

    def apply(self, x: np.ndarray, direction: Direction):
        if direction is Direction.FORWARD:
            tape = Tape()
            y, ld = self.forward(tape, Variable(x))
            return y.value, _as_batch_logdet(ld.value, x.shape[0])
        x_out, ld = self.inverse(x)
        return x_out, _as_batch_logdet(-ld, x.shape[0])


class CouplingNet:
    """conv3x3 -> conv1x1 -> conv3x3 stack producing scale logits and shift."""

    def __init__(self, c_in: int, width: int, c_out: int, rng, name: str):
        self.name = name
        self.f1 = Variable(0.05 * rng.normal(size=(width, c_in, 3, 3)), True, f"{name}.f1")
        self.s1 = Variable(np.ones(width), True, f"{name}.s1")
        self.b1 = Variable(np.zeros(width), True, f"{name}.b1")
        self.f2 = Variable(0.05 * rng.normal(size=(width, width, 1, 1)), True, f"{name}.f2")
        self.s2 = Variable(np.ones(width), True, f"{name}.s2")
        self.b2 = Variable(np.zeros(width), True, f"{name}.b2")
        self.f3 = Variable(np.zeros((c_out, width, 3, 3)), True, f"{name}.f3")

    def params(self):
        return [self.f1, self.s1, self.b1, self.f2, self.s2, self.b2, self.f3]

    def __call__(self, tape: Tape, x: Variable) -> Variable:
        h = tape.conv2d(x, self.f1, (1, 1, 1, 1))
        h = tape.silu(tape.affine_per_channel(h, self.s1, self.b1))
        h = tape.conv2d(h, self.f2, (0, 0, 0, 0))
        h = tape.silu(tape.affine_per_channel(h, self.s2, self.b2))
        return tape.conv2d(h, self.f3, (1, 1, 1, 1))

    def eval_np(self, x: np.ndarray) -> np.ndarray:
        return self(Tape(), Variable(x)).value


class Coupling:
    """Affine coupling: first channel half transformed, second half carried.

    The scale is sigmoid(raw + 2) with a zero-initialized final filter, so
    the layer starts near the identity (scale sigmoid(2), shift 0).
    """

    def __init__(self, c: int, width: int, rng, name: str = "coupling"):
        if c % 2:
            raise ValueError(f"coupling needs an even channel count, got {c}")
        self.c = c
        self.name = name
        self.net = CouplingNet(c // 2, width, c, rng, f"{name}.net")

    def params(self):
        return self.net.params()

    def _scale_shift(self, tape: Tape, xb: Variable):
        out = self.net(tape, xb)
        raw = tape.slice_channels(out, 0, self.c // 2)
        shift = tape.slice_channels(out, self.c // 2, self.c)
        scale = tape.sigmoid(tape.add(raw, 2.0))
        return scale, shift

    def forward(self, tape: Tape, x: Variable):
        half = self.c // 2
        xa = tape.slice_channels(x, 0, half)
        xb = tape.slice_channels(x, half, self.c)
        scale, shift = self._scale_shift(tape, xb)
        ya = tape.add(tape.mul(xa, scale), shift)
        y = tape.concat_channels(ya, xb)
        ld = tape.sum(tape.log(scale), axis=(1, 2, 3))
        return y, ld

    def inverse(self, y: np.ndarray):
        half = self.c // 2
        ya, yb = y[:, :half], y[:, half:]
        tape = Tape()
        scale, shift = self._scale_shift(tape, Variable(yb))
        xa = (ya - shift.value) / scale.value
        x = np.concatenate([xa, yb], axis=1)
        ld = np.sum(np.log(scale.value), axis=(1, 2, 3))
        return x, ld

    def apply(self, x: np.ndarray, direction: Direction):
        if direction is Direction.FORWARD:
            tape = Tape()
            y, ld = self.forward(tape, Variable(x))
            return y.value, _as_batch_logdet(ld.value, x.shape[0])
        x_out, ld = self.inverse(x)
        return x_out, -ld


class Inv1x1:
    """Invertible 1x1 convolution: plain W, PLU, or Householder QR."""

    def __init__(self, c: int, variant: str, rng, num_reflections: int = 0, name: str = "inv1x1"):
        self.c = c
        self.variant = variant
        self.name = name
        eye = np.eye(c)
        if variant == "w1x1":
            self.w = Variable(_random_rotation(c, rng), True, f"{name}.w")
        elif variant == "plu":
            w0 = _random_rotation(c, rng)
            lu, piv, _, bad = numerics._lu_decompose(w0)
            assert bad < 0, "random rotation cannot be singular"
            perm = np.zeros((c, c))
            perm[piv, np.arange(c)] = 1.0
            lower = np.tril(lu.real, -1)
            upper = np.triu(lu.real, 1)
            s = np.diag(lu.real).copy()
            self.perm = perm
            self.sign = np.sign(s)
            self.l_weights = Variable(lower, True, f"{name}.l_weights")
            self.u_weights = Variable(upper, True, f"{name}.u_weights")
            self.log_s = Variable(np.log(np.abs(s)), True, f"{name}.log_s")
        elif variant == "qr":
            k = num_reflections if num_reflections > 0 else c
            self.vs = [
                Variable(rng.normal(size=c), True, f"{name}.v{i}") for i in range(k)
            ]
            self.r_weights = Variable(np.zeros((c, c)), True, f"{name}.r_weights")
            self.sign = np.ones(c)
            self.log_s = Variable(np.zeros(c), True, f"{name}.log_s")
        else:
            raise ValueError(f"unknown 1x1 variant {variant!r}")
        self._eye = eye
        self._strict_lower = np.tril(np.ones((c, c)), -1)
        self._strict_upper = np.triu(np.ones((c, c)), 1)

    def params(self):
        if self.variant == "w1x1":
            return [self.w]
        if self.variant == "plu":
            return [self.l_weights, self.u_weights, self.log_s]
        return [*self.vs, self.r_weights, self.log_s]

    def _diag(self, tape: Tape):
        s = tape.mul(tape.exp(self.log_s), self.sign)
        return tape.mul(tape.reshape(s, (self.c, 1)), self._eye)

    def compose(self, tape: Tape) -> Variable:
        """The composed c x c matrix W as a tape Variable."""
        if self.variant == "w1x1":
            return self.w
        if self.variant == "plu":
            lower = tape.add(tape.mul(self.l_weights, self._strict_lower), self._eye)
            upper = tape.add(tape.mul(self.u_weights, self._strict_upper), self._diag(tape))
            return tape.matmul(self.perm, tape.matmul(lower, upper))
        q = None
        for v in self.vs:
            vtv = tape.sum(tape.mul(v, v))
            outer = tape.matmul(tape.reshape(v, (self.c, 1)), tape.reshape(v, (1, self.c)))
            refl = tape.add(self._eye, tape.mul(outer, tape.mul(tape.div(2.0, vtv), -1.0)))
            q = refl if q is None else tape.matmul(q, refl)
        r_plus_d = tape.add(tape.mul(self.r_weights, self._strict_upper), self._diag(tape))
        return r_plus_d if q is None else tape.matmul(q, r_plus_d)

    def compose_np(self) -> np.ndarray:
        return self.compose(Tape()).value

    def orthogonal_np(self) -> np.ndarray:
        if self.variant != "qr":
            raise ValueError("only the QR variant has an orthogonal factor")
        return numerics.householder_orthogonal([v.value for v in self.vs], self.c)

    def forward(self, tape: Tape, x: Variable):
        n, _, h, w = x.value.shape
        wmat = self.compose(tape)
        y = tape.matmul_per_pixel(wmat, x)
        if self.variant == "w1x1":
            ld = tape.mul(tape.logdet(wmat), float(h * w))
        else:
            ld = tape.mul(tape.sum(self.log_s), float(h * w))
        return y, ld

    def logdet_np(self, h: int, w: int) -> float:
        if self.variant == "w1x1":
            _, ld = numerics.lu_slogdet(self.w.value)
            return float(h * w * ld)
        return float(h * w * np.sum(self.log_s.value))

    def inverse(self, y: np.ndarray):
        n, c, h, w = y.shape
        wmat = self.compose_np()
        if self.variant == "w1x1":
            _, ld = numerics.lu_slogdet(wmat)
            if not np.isfinite(ld) or ld < math.log(1e-30):
                raise NonInvertibleLayerError(
                    f"{self.name}: |det W| below 1e-30, not invertible"
                )
        flat = np.moveaxis(y, 1, -1).reshape(-1, c).T  # (c, n*h*w)
        x_flat = numerics.solve(wmat, flat)
        x = np.moveaxis(x_flat.T.reshape(n, h, w, c).real, -1, 1)
        return np.ascontiguousarray(x), self.logdet_np(h, w)

    def apply(self, x: np.ndarray, direction: Direction):
        if direction is Direction.FORWARD:
            tape = Tape()
            y, ld = self.forward(tape, Variable(x))
            return y.value, _as_batch_logdet(ld.value, x.shape[0])
        x_out, ld = self.inverse(x)
        return x_out, _as_batch_logdet(-ld, x.shape[0])


class Emerging:
    """Invertible d x d convolution from one 1x1 and two masked filters.

    Forward applies the 1x1 first, then the LOWER-masked p x p filter, then
    the UPPER-masked one (p = (d+1)/2); the receptive field of the chain
    equals a standard d x d convolution. Inversion runs the substitutions in
    reverse order followed by the 1x1 solve.
    """

    def __init__(self, c: int, d: int, rng, name: str = "emerging"):
        if d % 2 == 0:
            raise ValueError(f"emerging kernel extent must be odd, got {d}")
        p = (d + 1) // 2
        self.c, self.d, self.p = c, d, p
        self.name = name
        self.mask_lower = convkit.build_autoregressive_mask(MaskVariant.LOWER, p, c)
        self.mask_upper = convkit.build_autoregressive_mask(MaskVariant.UPPER, p, c)
        self.w = Variable(_random_rotation(c, rng), True, f"{name}.w")
        self.w1 = Variable(self._init_masked(self.mask_lower, rng), True, f"{name}.w1")
        self.w2 = Variable(self._init_masked(self.mask_upper, rng), True, f"{name}.w2")

    def _init_masked(self, mask: Filter, rng) -> np.ndarray:
        taps = 0.05 * rng.normal(size=mask.taps.shape)
        my, mx = mask.center
        for ch in range(self.c):
            taps[ch, ch, my, mx] = 1.0
        return taps

    def params(self):
        return [self.w, self.w1, self.w2]

    def _diag_indices(self, mask: Filter):
        my, mx = mask.center
        return [(ch, ch, my, mx) for ch in range(self.c)]

    def filters_np(self):
        k1 = Filter(self.w1.value * self.mask_lower.taps, self.mask_lower.pad)
        k2 = Filter(self.w2.value * self.mask_upper.taps, self.mask_upper.pad)
        return k1, k2

    def merged_filter(self) -> Filter:
        """Single centered d x d filter equivalent to the whole layer."""
        k1, k2 = self.filters_np()
        return convkit.combine_filters(k2, convkit.combine_filters(k1, convkit.as_1x1(self.w.value)))

    def forward(self, tape: Tape, x: Variable):
        n, _, h, w = x.value.shape
        y = tape.matmul_per_pixel(self.w, x)
        k1 = tape.mul(self.w1, self.mask_lower.taps)
        y = tape.conv2d(y, k1, self.mask_lower.pad)
        k2 = tape.mul(self.w2, self.mask_upper.taps)
        y = tape.conv2d(y, k2, self.mask_upper.pad)
        ld_taps = tape.add(
            tape.logabs_entries(self.w1, self._diag_indices(self.mask_lower)),
            tape.logabs_entries(self.w2, self._diag_indices(self.mask_upper)),
        )
        ld = tape.mul(tape.add(tape.logdet(self.w), ld_taps), float(h * w))
        return y, ld

    def logdet_np(self, h: int, w: int) -> float:
        k1, k2 = self.filters_np()
        _, ld_w = numerics.lu_slogdet(self.w.value)
        total = ld_w
        total += np.sum(np.log(np.abs(k1.center_diagonal())))
        total += np.sum(np.log(np.abs(k2.center_diagonal())))
        return float(h * w * total)

    def inverse(self, y: np.ndarray):
        n, c, h, w = y.shape
        k1, k2 = self.filters_np()
        t2 = convkit.solve_autoregressive(y, k2, MaskVariant.UPPER)
        t1 = convkit.solve_autoregressive(t2, k1, MaskVariant.LOWER)
        flat = np.moveaxis(t1, 1, -1).reshape(-1, c).T
        x_flat = numerics.solve(self.w.value, flat)
        x = np.moveaxis(x_flat.T.reshape(n, h, w, c).real, -1, 1)
        return np.ascontiguousarray(x), self.logdet_np(h, w)

    def apply(self, x: np.ndarray, direction: Direction):
        if direction is Direction.FORWARD:
            tape = Tape()
            y, ld = self.forward(tape, Variable(x))
            return y.value, _as_batch_logdet(ld.value, x.shape[0])
        x_out, ld = self.inverse(x)
        return x_out, _as_batch_logdet(-ld, x.shape[0])


class Periodic:
    """Invertible d x d convolution with wrap-around boundaries.

    The transform decouples per frequency: What_uv is the c x c channel
    matrix of the filter spectrum, the forward map multiplies each
    frequency's channel vector by it, and the log-determinant is the sum of
    per-frequency log|det|. Inverse matrices are cached and keyed by a
    parameter version counter.
    """

    def __init__(self, c: int, d: int, rng, name: str = "periodic"):
        if d % 2 == 0:
            raise ValueError(f"periodic kernel extent must be odd, got {d}")
        self.c, self.d = c, d
        self.name = name
        taps = 0.05 * rng.normal(size=(c, c, d, d))
        taps[:, :, d // 2, d // 2] += np.eye(c)
        self.w = Variable(taps, True, f"{name}.w")
        self.pad = (d // 2, d // 2, d // 2, d // 2)
        self.version = 0
        self._cache_version = -1
        self._cache_key = None
        self._cache_inv = None

    def params(self):
        return [self.w]

    @property
    def center(self):
        return (self.pad[0], self.pad[2])

    def bump_version(self):
        self.version += 1

    def spectrum(self, h: int, w: int) -> np.ndarray:
        return periodic_spectrum(self.w.value, h, w, self.center)

    def forward(self, tape: Tape, x: Variable):
        n, _, h, w = x.value.shape
        y = tape.conv2d(x, self.w, self.pad, boundary=convkit.WRAP)
        ld = tape.periodic_logdet(self.w, h, w, self.center)
        return y, ld

    def logdet_np(self, h: int, w: int) -> float:
        return periodic_logdet_value(self.w.value, h, w, self.center)

    def forward_frequency(self, x: np.ndarray):
        """Frequency-domain forward: z_hat[:,uv] = What_uv @ x_hat[:,uv]."""
        n, c, h, w = x.shape
        what = self.spectrum(h, w)
        xhat = numerics.dft2_stack(x)
        zhat = np.einsum("uvoc,ncuv->nouv", what, xhat)
        z = numerics.idft2_stack(zhat, imag_tol=1e-6)
        return z, self.logdet_np(h, w)

    def _inverse_cache(self, h: int, w: int) -> np.ndarray:
        key = (h, w)
        if self._cache_version == self.version and self._cache_key == key:
            return self._cache_inv
        what = self.spectrum(h, w)
        inv = np.empty_like(what)
        eye = np.eye(self.c, dtype=complex)
        for u in range(h):
            for v in range(w):
                try:
                    inv[u, v] = numerics.solve(what[u, v], eye)
                except numerics.SingularMatrixError as e:
                    raise SingularFrequencyError(u, v) from e
        self._cache_version = self.version
        self._cache_key = key
        self._cache_inv = inv
        return inv

    def inverse(self, y: np.ndarray):
        n, c, h, w = y.shape
        inv = self._inverse_cache(h, w)
        yhat = numerics.dft2_stack(y)
        xhat = np.einsum("uvoc,ncuv->nouv", inv, yhat)
        x = numerics.idft2_stack(xhat, imag_tol=1e-6)
        return x, self.logdet_np(h, w)

    def apply(self, x: np.ndarray, direction: Direction):
        if direction is Direction.FORWARD:
            y, ld = self.forward_frequency(x)
            return y, _as_batch_logdet(ld, x.shape[0])
        x_out, ld = self.inverse(x)
        return x_out, _as_batch_logdet(-ld, x.shape[0])


class Squeeze:
    """2x2 space-to-depth: (c, h, w) -> (4c, h/2, w/2), volume preserving."""

    name = "squeeze"

    def params(self):
        return []

    def forward(self, tape: Tape, x: Variable):
        return tape.squeeze(x), None

    def inverse(self, y: np.ndarray):
        return unsqueeze2(y), 0.0

    def apply(self, x: np.ndarray, direction: Direction):
        if direction is Direction.FORWARD:
            return squeeze2(x), np.zeros(x.shape[0])
        return unsqueeze2(x), np.zeros(x.shape[0])


class Split:
    """Factor out half the channels under a learned conditional prior.

    The kept half parameterizes (mu, log sigma) for the factored half via a
    zero-initialized 3x3 convolution, so the prior starts standard normal.
    """

    def __init__(self, c: int, rng, name: str = "split"):
        if c % 2:
            raise ValueError(f"split needs an even channel count, got {c}")
        self.c = c
        self.name = name
        self.prior = Variable(np.zeros((c, c // 2, 3, 3)), True, f"{name}.prior")

    def params(self):
        return [self.prior]

    def _mu_logsigma(self, tape: Tape, y: Variable):
        out = tape.conv2d(y, self.prior, (1, 1, 1, 1))
        half = self.c // 2
        return tape.slice_channels(out, 0, half), tape.slice_channels(out, half, self.c)

    def forward(self, tape: Tape, x: Variable):
        half = self.c // 2
        y = tape.slice_channels(x, 0, half)
        z = tape.slice_channels(x, half, self.c)
        mu, log_sigma = self._mu_logsigma(tape, y)
        zn = tape.mul(tape.sub(z, mu), tape.exp(tape.mul(log_sigma, -1.0)))
        per_elem = tape.sub(tape.mul(tape.mul(zn, zn), -0.5), log_sigma)
        chw = z.value[0].size
        logp = tape.add(tape.sum(per_elem, axis=(1, 2, 3)), -0.5 * LOG_2PI * chw)
        return y, logp, z.value

    def inverse(self, y: np.ndarray, z: np.ndarray | None, temperature: float, rng):
        tape = Tape()
        mu, log_sigma = self._mu_logsigma(tape, Variable(y))
        if z is None:
            eps = rng.standard_normal(size=mu.value.shape)
            z = mu.value + np.exp(log_sigma.value) * (temperature * eps)
        return np.concatenate([y, z], axis=1)


class FlowStep:
    """actnorm -> invertible convolution -> affine coupling."""

    def __init__(self, c: int, spec: ModelSpec, rng, name: str):
        self.name = name
        self.actnorm = Actnorm(c, f"{name}.actnorm")
        if spec.conv_type == "emerging":
            self.conv = Emerging(c, spec.kernel, rng, f"{name}.emerging")
        elif spec.conv_type == "periodic":
            self.conv = Periodic(c, spec.kernel, rng, f"{name}.periodic")
        else:
            self.conv = Inv1x1(c, spec.conv_type, rng, spec.num_reflections, f"{name}.inv1x1")
        self.coupling = Coupling(c, spec.width, rng, f"{name}.coupling")
        self.sublayers = [self.actnorm, self.conv, self.coupling]

    def params(self):
        return [p for layer in self.sublayers for p in layer.params()]


class FlowModel:
    """Multi-scale flow: per level a squeeze, D flow steps, then a split
    (except after the last level). Standard normal prior on the final
    representation and on every factored-out part."""

    def __init__(self, spec: ModelSpec, rng: np.random.Generator | None = None):
        self.spec = spec
        rng = rng if rng is not None else np.random.default_rng(spec.seed)
        self.layers = []
        self.z_shapes = []
        c, h, w = spec.img_channels, spec.img_h, spec.img_w
        for level in range(spec.levels):
            self.layers.append(Squeeze())
            c, h, w = 4 * c, h // 2, w // 2
            for d in range(spec.depth):
                step = FlowStep(c, spec, rng, f"lvl{level}.flow{d}")
                self.layers.extend(step.sublayers)
            if level < spec.levels - 1:
                self.layers.append(Split(c, rng, f"lvl{level}.split"))
                self.z_shapes.append((c // 2, h, w))
                c = c // 2
        self.final_shape = (c, h, w)
        self.dim = spec.img_channels * spec.img_h * spec.img_w

    # ----- parameters and persistence -----

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def state_dict(self) -> dict:
        state = {}
        for layer in self.layers:
            for p in layer.params():
                state[p.name] = p.value
            if isinstance(layer, Actnorm):
                state[f"{layer.name}.initialized"] = np.array([float(layer.initialized)])
        return state

    def load_state_dict(self, state: dict):
        own = {}
        flags = {}
        for layer in self.layers:
            for p in layer.params():
                own[p.name] = p
            if isinstance(layer, Actnorm):
                flags[f"{layer.name}.initialized"] = layer
        expected = set(own) | set(flags)
        if expected != set(state):
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise ValueError(f"parameter name mismatch: missing {missing}, unexpected {extra}")
        for name, value in state.items():
            if name in flags:
                flags[name].initialized = bool(value[0])
                continue
            p = own[name]
            if p.value.shape != value.shape:
                raise ValueError(
                    f"shape mismatch for {name}: checkpoint {value.shape}, model {p.value.shape}"
                )
            p.value = value.astype(float).copy()
        self.note_params_changed()

    def num_params(self) -> int:
        return int(sum(p.value.size for p in self.params()))

    def note_params_changed(self):
        for layer in self.layers:
            if isinstance(layer, Periodic):
                layer.bump_version()

    # ----- density evaluation (taped) -----

    def forward_tape(self, tape: Tape, x: Variable):
        """Returns (z Variable, per-example log p contribution, logdet sum)."""
        n = x.value.shape[0]
        total_ld = None
        prior_logp = None
        h = x
        for layer in self.layers:
            if isinstance(layer, Squeeze):
                h, _ = layer.forward(tape, h)
            elif isinstance(layer, Split):
                h, logp, _ = layer.forward(tape, h)
                prior_logp = logp if prior_logp is None else tape.add(prior_logp, logp)
            else:
                h, ld = layer.forward(tape, h)
                if ld is not None:
                    total_ld = ld if total_ld is None else tape.add(total_ld, ld)
        sq = tape.sum(tape.mul(h, h), axis=(1, 2, 3))
        final_logp = tape.add(tape.mul(sq, -0.5), -0.5 * LOG_2PI * h.value[0].size)
        prior_logp = final_logp if prior_logp is None else tape.add(prior_logp, final_logp)
        return h, prior_logp, total_ld

    def bits_per_dim(self, tape: Tape, x_cont: np.ndarray):
        """Per-example bits/dim of continuous inputs in [0, 1); includes the
        1/256 pixel-scaling Jacobian term."""
        xv = Variable(np.asarray(x_cont, float))
        _, prior_logp, total_ld = self.forward_tape(tape, xv)
        logp = prior_logp if total_ld is None else tape.add(prior_logp, total_ld)
        logp = tape.add(logp, -self.dim * math.log(256.0))
        return tape.mul(logp, -1.0 / (self.dim * LOG2))

    def log_prob_bits(self, x_int: np.ndarray, rng: np.random.Generator | None = None):
        """Per-example bits/dim of integer images under uniform dequantization.

        rng=None uses the deterministic midpoint u = 0.5.
        """
        x_cont = dequantize(x_int, rng)
        tape = Tape()
        return self.bits_per_dim(tape, x_cont).value

    def training_loss(self, x_int: np.ndarray, rng: np.random.Generator | None):
        """(tape, scalar mean-bits loss, per-example bits) for one batch."""
        x_cont = dequantize(x_int, rng)
        tape = Tape()
        bits = self.bits_per_dim(tape, x_cont)
        loss = tape.mul(tape.sum(bits), 1.0 / x_cont.shape[0])
        return tape, loss, bits.value

    # ----- inference-direction numpy paths -----

    def encode(self, x_cont: np.ndarray):
        """x -> (z_final, split z list, per-example total logdet)."""
        h = np.asarray(x_cont, float)
        n = h.shape[0]
        total_ld = np.zeros(n)
        zs = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Split):
                half = layer.c // 2
                zs.append(h[:, half:].copy())
                h = np.ascontiguousarray(h[:, :half])
            else:
                h, ld = layer.apply(h, Direction.FORWARD)
                total_ld = total_ld + ld
        return h, zs, total_ld

    def decode(
        self,
        z_final: np.ndarray,
        zs: list | None = None,
        temperature: float = 1.0,
        rng: np.random.Generator | None = None,
    ) -> np.ndarray:
        """Inverse pass; draws split components from the prior when zs is None."""
        rng = rng if rng is not None else np.random.default_rng(0)
        h = np.asarray(z_final, float)
        stack = list(zs) if zs is not None else None
        for i in reversed(range(len(self.layers))):
            layer = self.layers[i]
            try:
                if isinstance(layer, Split):
                    z = stack.pop() if stack is not None else None
                    h = layer.inverse(h, z, temperature, rng)
                else:
                    h, _ = layer.apply(h, Direction.INVERSE)
            except (
                NonInvertibleLayerError,
                convkit.NonInvertibleFilterError,
                numerics.SingularMatrixError,
            ) as e:
                raise NonInvertibleLayerError(
                    f"layer {i} ({getattr(layer, 'name', type(layer).__name__)}): {e}"
                ) from e
        return h

    def sample_continuous(self, n: int, temperature: float, rng: np.random.Generator):
        z = temperature * rng.standard_normal(size=(n, *self.final_shape))
        return self.decode(z, None, temperature, rng)


def dequantize(x_int: np.ndarray, rng: np.random.Generator | None) -> np.ndarray:
    """(x + u) / 256 with u ~ U[0,1); u = 0.5 when rng is None."""
    x_int = np.asarray(x_int)
    if x_int.min() < 0 or x_int.max() > 255:
        raise ValueError("pixel values must lie in {0, ..., 255}")
    u = 0.5 if rng is None else rng.random(size=x_int.shape)
    return (x_int.astype(float) + u) / 256.0


def flow_logprob(x_int: np.ndarray, model: FlowModel, rng=None) -> np.ndarray:
    """Per-example bits/dim (negative log2-likelihood per dimension)."""
    return model.log_prob_bits(x_int, rng)


def flow_sample(model: FlowModel, n: int, temperature: float, rng) -> np.ndarray:
    """Draw n images; inverse pass then clamp to [0, 1) and quantize to 8 bits."""
    x = model.sample_continuous(n, temperature, rng)
    x = np.clip(x, 0.0, 1.0 - 1e-9)
    return np.floor(x * 256.0).astype(np.uint8)
