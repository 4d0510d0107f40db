"""Array primitives shared by every layer of the network.

All functions are pure and work on float64 numpy arrays.  Feature-map stacks
are plain arrays shaped ``(..., maps, height, width)``; any leading axes are
treated as batch/time axes.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, DomainError

TANH_GAIN = 1.7159
TANH_SLOPE = 2.0 / 3.0
KL_FLOOR = 1e-10


def _check_finite(u):
    if not np.all(np.isfinite(u)):
        raise DomainError("non-finite input")


def scaled_tanh(u):
    """LeCun's scaled hyperbolic tangent, ``1.7159 * tanh(2u/3)``."""
    u = np.asarray(u, dtype=np.float64)
    _check_finite(u)
    return TANH_GAIN * np.tanh(TANH_SLOPE * u)


def scaled_tanh_prime(u):
    u = np.asarray(u, dtype=np.float64)
    _check_finite(u)
    c = np.cosh(TANH_SLOPE * u)
    return TANH_GAIN * TANH_SLOPE / (c * c)


def tanh_prime_from_output(v):
    """Derivative of :func:`scaled_tanh` expressed through its output ``v``."""
    return TANH_SLOPE * (TANH_GAIN - v * v / TANH_GAIN)


@dataclass
class KernelBank:
    """Convolution kernels ``[out, in, kh, kw]`` with one bias per output map."""

    weights: np.ndarray
    biases: np.ndarray | None = None
    stride: int = 1

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 4:
            raise ConfigurationError("kernel weights must be 4-D [out, in, kh, kw]")
        if self.biases is not None:
            self.biases = np.asarray(self.biases, dtype=np.float64)
            if self.biases.shape != (self.weights.shape[0],):
                raise ConfigurationError("one bias per output map required")
        if int(self.stride) != self.stride or self.stride < 1:
            raise ConfigurationError(f"stride must be a positive integer, got {self.stride}")
        self.stride = int(self.stride)

    @property
    def out_maps(self):
        return self.weights.shape[0]

    @property
    def in_maps(self):
        return self.weights.shape[1]

    @property
    def kh(self):
        return self.weights.shape[2]

    @property
    def kw(self):
        return self.weights.shape[3]


def conv_output_shape(height, width, kh, kw, stride):
    """Valid-mode output size ``(floor((H-kh)/s)+1, floor((W-kw)/s)+1)``."""
    if kh > height or kw > width or kh < 1 or kw < 1:
        raise ConfigurationError(
            f"kernel {kh}x{kw} does not fit input {height}x{width}")
    if stride < 1:
        raise ConfigurationError("stride must be >= 1")
    return (height - kh) // stride + 1, (width - kw) // stride + 1


def conv_windows(x, kh, kw, stride):
    """Strided patch view ``(..., C, oh, ow, kh, kw)`` of ``x`` (no copy)."""
    oh, ow = conv_output_shape(x.shape[-2], x.shape[-1], kh, kw, stride)
    win = sliding_window_view(x, (kh, kw), axis=(-2, -1))
    return win[..., : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride, :, :]


def conv_valid(x, bank: KernelBank):
    """Strided valid cross-correlation of a feature-map stack with a kernel bank.

    ``out[..., m, y, x] = sum_j sum_ab w[m, j, a, b] * in[..., j, y*s + a, x*s + b] + b[m]``
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 3 or x.shape[-3] != bank.in_maps:
        raise ConfigurationError(
            f"input has {x.shape[-3] if x.ndim >= 3 else '?'} maps, kernel expects {bank.in_maps}")
    win = conv_windows(x, bank.kh, bank.kw, bank.stride)
    lead = win.ndim - 5
    out = np.tensordot(win, bank.weights, axes=([lead, lead + 3, lead + 4], [1, 2, 3]))
    out = np.moveaxis(out, -1, -3)
    if bank.biases is not None:
        out = out + bank.biases[:, None, None]
    return out


def conv_backward(dout, x, bank: KernelBank, need_input_grad=True):
    """Gradients of :func:`conv_valid` for output gradient ``dout``.

    Leading axes of ``dout`` and ``x`` are summed over for the kernel and bias
    gradients.  Returns ``(dweights, dbiases, dx)``; ``dx`` is None unless
    requested.
    """
    s = bank.stride
    kh, kw = bank.kh, bank.kw
    win = conv_windows(x, kh, kw, s)
    lead = dout.ndim - 3
    lead_axes = list(range(lead))
    # dW[o,c,i,j] = sum_{lead,y,x} dout[...,o,y,x] * win[...,c,y,x,i,j]
    dw = np.tensordot(dout, win, axes=(lead_axes + [lead + 1, lead + 2],
                                       lead_axes + [lead + 1, lead + 2]))
    db = dout.sum(axis=tuple(lead_axes) + (lead + 1, lead + 2))
    dx = None
    if need_input_grad:
        oh, ow = dout.shape[-2:]
        dx = np.zeros(x.shape, dtype=np.float64)
        # contrib[..., c, y, x, i, j]
        contrib = np.tensordot(dout, bank.weights, axes=([lead], [0]))
        contrib = np.moveaxis(contrib, -3, lead)
        for i in range(kh):
            for j in range(kw):
                dx[..., i : i + s * (oh - 1) + 1 : s, j : j + s * (ow - 1) + 1 : s] += contrib[..., i, j]
    return dw, db, dx


def leaky_update(u_prev, drive, tau):
    """Leaky integration ``(1 - 1/tau) * u_prev + (1/tau) * drive``."""
    if tau < 1:
        raise ConfigurationError(f"time constant must be >= 1, got {tau}")
    return (1.0 - 1.0 / tau) * u_prev + (1.0 / tau) * drive


@dataclass(frozen=True)
class SoftmaxGroupSpec:
    """Layout of the grouped softmax output layer and its analog codec.

    ``ranges`` holds one ``(lo, hi)`` pair per group; ``sigma`` is the width of
    the Gaussian population code as a fraction of each group's range.
    """

    group_count: int
    group_size: int
    ranges: tuple = field(default=())
    sigma: float = 0.05

    def __post_init__(self):
        if self.group_count < 1 or self.group_size < 1:
            raise ConfigurationError("group_count and group_size must be positive")
        rng = tuple((float(lo), float(hi)) for lo, hi in (self.ranges or [(0.0, 1.0)] * self.group_count))
        object.__setattr__(self, "ranges", rng)
        if len(rng) != self.group_count:
            raise ConfigurationError("one (lo, hi) range per group required")
        if any(lo >= hi for lo, hi in rng):
            raise ConfigurationError("each range needs lo < hi")
        if not self.sigma > 0:
            raise ConfigurationError("sigma must be positive")

    @property
    def size(self):
        return self.group_count * self.group_size

    @property
    def lo(self):
        return np.array([r[0] for r in self.ranges])

    @property
    def hi(self):
        return np.array([r[1] for r in self.ranges])

    def reference_points(self):
        """``[group_count, group_size]`` array of uniformly spaced code centres."""
        frac = np.linspace(0.0, 1.0, self.group_size) if self.group_size > 1 else np.array([0.5])
        return self.lo[:, None] + (self.hi - self.lo)[:, None] * frac[None, :]

    def midpoints(self):
        return 0.5 * (self.lo + self.hi)


def _grouped(u, spec):
    u = np.asarray(u, dtype=np.float64)
    if u.shape[-1] != spec.size:
        raise ConfigurationError(f"expected {spec.size} output values, got {u.shape[-1]}")
    return u.reshape(u.shape[:-1] + (spec.group_count, spec.group_size))


def grouped_softmax(u, spec: SoftmaxGroupSpec):
    """Softmax normalised independently inside each output group."""
    g = _grouped(u, spec)
    e = np.exp(g - g.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)
    return y.reshape(np.shape(u))


def kl_loss(target, output, spec: SoftmaxGroupSpec | None = None):
    """KL divergence ``sum target * log(target / output)``, with 0 log 0 = 0.

    Output probabilities are floored at ``KL_FLOOR`` inside the log only.
    Sums over every axis; ``spec`` is accepted for symmetry with the codec.
    """
    t = np.asarray(target, dtype=np.float64)
    y = np.asarray(output, dtype=np.float64)
    if t.shape != y.shape:
        raise ConfigurationError("target and output shapes differ")
    pos = t > 0
    tp = t[pos]
    return float(np.sum(tp * (np.log(tp) - np.log(np.maximum(y[pos], KL_FLOOR)))))


def kl_grad_logits(target, output):
    """Gradient of :func:`kl_loss` w.r.t. the pre-softmax states of each group.

    ``output`` and ``target`` are grouped arrays ``(..., G, S)``.  Where the
    floor is active the log term is constant, so it contributes nothing.
    """
    yg = np.where(output >= KL_FLOOR, -target, 0.0)
    return yg - output * yg.sum(axis=-1, keepdims=True)


def encode_analog(values, spec: SoftmaxGroupSpec, return_clamped=False):
    """Gaussian population code of one analog value per group.

    ``values`` has shape ``(..., group_count)``; the result has shape
    ``(..., group_count * group_size)``.  Out-of-range values are clamped and
    a ``RuntimeWarning`` is issued.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.shape[-1] != spec.group_count:
        raise ConfigurationError(f"expected {spec.group_count} values, got {v.shape[-1]}")
    lo, hi = spec.lo, spec.hi
    clamped = bool(np.any((v < lo) | (v > hi)))
    if clamped:
        warnings.warn("analog value outside its group range; clamped", RuntimeWarning, stacklevel=2)
        v = np.clip(v, lo, hi)
    ref = spec.reference_points()
    width = spec.sigma * (hi - lo)
    z = (v[..., :, None] - ref) / width[:, None]
    logm = -0.5 * z * z
    m = np.exp(logm - logm.max(axis=-1, keepdims=True))
    code = m / m.sum(axis=-1, keepdims=True)
    code = code.reshape(v.shape[:-1] + (spec.size,))
    return (code, clamped) if return_clamped else code


def decode_analog(y, spec: SoftmaxGroupSpec):
    """Expected reference value per group (inverse of :func:`encode_analog`)."""
    g = _grouped(y, spec)
    return np.sum(g * spec.reference_points(), axis=-1)
