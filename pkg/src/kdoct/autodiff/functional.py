"""Differentiable primitives used by both network families.

Each op computes its forward result with numpy, then registers a closure
that maps the output gradient to one gradient per input (``None`` for
inputs that are constants).
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from ..errors import ShapeError
from .tensor import Tensor, make_result

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x, dtype=dtype)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _binary_operands(a, b):
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def grad(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result("add", a.data + b.data, (a, b), grad)


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def grad(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result("sub", a.data - b.data, (a, b), grad)


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def grad(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_result("mul", a.data * b.data, (a, b), grad)


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def grad(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make_result("div", a.data / b.data, (a, b), grad)


def neg(a: Tensor) -> Tensor:
    return make_result("neg", -a.data, (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    """``a ** exponent`` for a constant exponent.

    The derivative is taken as 0 where the base is 0 and the exponent is
    below 1, instead of propagating an infinity.
    """
    exponent = float(exponent)
    out = np.power(a.data, exponent)

    def grad(g):
        if exponent == 0.0:
            return (np.zeros_like(a.data),)
        with np.errstate(divide="ignore", invalid="ignore"):
            d = exponent * np.power(a.data, exponent - 1.0)
        d = np.where(np.isfinite(d), d, 0.0).astype(a.dtype)
        return (g * d,)

    return make_result("pow", out, (a,), grad)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_result("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return make_result("log", out, (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return make_result("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_result("relu", np.where(mask, a.data, 0).astype(a.dtype), (a,),
                       lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return make_result("sigmoid", out, (a,), lambda g: (g * out * (1 - out),))


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the erf-based Gaussian CDF."""
    x = a.data
    cdf = (0.5 * (1.0 + erf(x / _SQRT2))).astype(x.dtype)
    out = x * cdf

    def grad(g):
        pdf = (_INV_SQRT_2PI * np.exp(-0.5 * x * x)).astype(x.dtype)
        return (g * (cdf + x * pdf),)

    return make_result("gelu", out, (a,), grad)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def grad(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_result("sum", np.asarray(out, dtype=a.dtype), (a,), grad)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def grad(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return ((np.broadcast_to(g, a.shape) / count).astype(a.dtype),)

    return make_result("mean", np.asarray(out, dtype=a.dtype), (a,), grad)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return make_result("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def flatten(a: Tensor) -> Tensor:
    """Collapse every axis after the batch axis."""
    return reshape(a, (a.shape[0], -1))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return make_result("transpose", out, (a,),
                       lambda g: (np.ascontiguousarray(g.transpose(inverse)),))


def take_along_last(a: Tensor, index) -> Tensor:
    """Pick ``a[i, index[i]]`` for a 2-D tensor, returning shape ``(N,)``."""
    index = np.asarray(index, dtype=np.int64)
    rows = np.arange(a.shape[0])
    out = a.data[rows, index]

    def grad(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (rows, index), g)
        return (full,)

    return make_result("take", out, (a,), grad)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _binary_operands(a, b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul expects 2-D operands", axis=None)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}", axis=1)

    def grad(g):
        return g @ b.data.T, a.data.T @ g

    return make_result("matmul", a.data @ b.data, (a, b), grad)


def global_avg_pool(a: Tensor) -> Tensor:
    """Mean over the spatial axes of an NCHW tensor, giving ``(N, C)``."""
    if a.ndim != 4:
        raise ShapeError(f"global_avg_pool expects NCHW input, got rank {a.ndim}", axis=None)
    return mean(a, axis=(2, 3))


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map over the trailing axis: ``x @ weight.T + bias``."""
    d_out, d_in = weight.shape
    if x.shape[-1] != d_in:
        raise ShapeError(
            f"linear: trailing dimension {x.shape[-1]} does not match weight input size {d_in}",
            axis=x.ndim - 1,
        )
    if bias is not None and bias.shape != (d_out,):
        raise ShapeError(f"linear: bias shape {bias.shape} != ({d_out},)", axis=0)
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, d_in)
    out = x2 @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def grad(g):
        g2 = g.reshape(-1, d_out)
        gx = (g2 @ weight.data).reshape(x.shape)
        gw = g2.T @ x2
        gb = g2.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_result("linear", out.reshape(lead + (d_out,)), inputs,
                       (lambda g: grad(g)[:2]) if bias is None else grad)


def _conv_output_size(size: int, k: int, stride: int, padding: int, axis: int, op: str) -> int:
    padded = size + 2 * padding
    if k > padded:
        raise ShapeError(
            f"{op}: kernel size {k} exceeds padded input size {padded} on axis {axis}", axis=axis
        )
    return (padded - k) // stride + 1


def _check_conv_args(op, x, kernel, stride, padding):
    if x.ndim != 4:
        raise ShapeError(f"{op}: input must be NCHW, got rank {x.ndim}", axis=None)
    if kernel.ndim != 4:
        raise ShapeError(f"{op}: kernel must be rank 4, got rank {kernel.ndim}", axis=None)
    if stride < 1:
        raise ShapeError(f"{op}: stride must be positive, got {stride}", axis=None)
    if padding < 0:
        raise ShapeError(f"{op}: padding must be non-negative, got {padding}", axis=None)


def _pad_hw(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # (N, C, Ho, Wo, Kh, Kw) strided view
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]


def _col2im(dwin: np.ndarray, padded_shape, stride: int, padding: int) -> np.ndarray:
    """Scatter-add window gradients (N, C, Ho, Wo, Kh, Kw) back onto the input."""
    n, c, ho, wo, kh, kw = dwin.shape
    dxp = np.zeros(padded_shape, dtype=dwin.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + (ho - 1) * stride + 1 : stride, j : j + (wo - 1) * stride + 1 : stride] += dwin[..., i, j]
    if padding:
        dxp = dxp[:, :, padding:-padding, padding:-padding]
    return dxp


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Dense 2-D cross-correlation over NCHW input.

    ``kernel`` has shape ``(Cout, Cin, Kh, Kw)``. Computed as one im2col
    matrix product.
    """
    _check_conv_args("conv2d", x, kernel, stride, padding)
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels on axis 1 but kernel expects {kcin}", axis=1)
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)", axis=0)
    ho = _conv_output_size(h, kh, stride, padding, 2, "conv2d")
    wo = _conv_output_size(w, kw, stride, padding, 3, "conv2d")

    xp = _pad_hw(x.data, padding)
    win = _windows(xp, kh, kw, stride, ho, wo)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * kh * kw)
    kmat = kernel.data.reshape(cout, -1)
    out = cols @ kmat.T
    if bias is not None:
        out = out + bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))

    def grad(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gk = (g2.T @ cols).reshape(kernel.shape)
        dcols = (g2 @ kmat).reshape(n, ho, wo, cin, kh, kw).transpose(0, 3, 1, 2, 4, 5)
        gx = _col2im(dcols, xp.shape, stride, padding)
        gb = g2.sum(axis=0) if bias is not None else None
        return (gx, gk, gb) if bias is not None else (gx, gk)

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return make_result("conv2d", out, inputs, grad)


def depthwise_conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Per-channel 2-D cross-correlation; ``kernel`` has shape ``(C, 1, Kh, Kw)``."""
    _check_conv_args("depthwise_conv2d", x, kernel, stride, padding)
    n, c, h, w = x.shape
    kc, one, kh, kw = kernel.shape
    if kc != c:
        raise ShapeError(f"depthwise_conv2d: input has {c} channels on axis 1 but kernel has {kc}", axis=1)
    if one != 1:
        raise ShapeError(f"depthwise_conv2d: kernel axis 1 must be 1, got {one}", axis=1)
    if bias is not None and bias.shape != (c,):
        raise ShapeError(f"depthwise_conv2d: bias shape {bias.shape} != ({c},)", axis=0)
    ho = _conv_output_size(h, kh, stride, padding, 2, "depthwise_conv2d")
    wo = _conv_output_size(w, kw, stride, padding, 3, "depthwise_conv2d")

    xp = _pad_hw(x.data, padding)
    win = _windows(xp, kh, kw, stride, ho, wo)
    k = kernel.data[:, 0]
    out = np.einsum("nchwij,cij->nchw", win, k)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def grad(g):
        gk = np.einsum("nchw,nchwij->cij", g, win)[:, None]
        dwin = g[..., None, None] * k[None, :, None, None, :, :]
        gx = _col2im(dwin, xp.shape, stride, padding)
        if bias is not None:
            return gx, gk, g.sum(axis=(0, 2, 3))
        return gx, gk

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return make_result("depthwise_conv2d", out, inputs, grad)


def layer_norm(x: Tensor, normalized_shape, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise over the trailing ``normalized_shape`` axes, then scale and shift."""
    normalized_shape = tuple(normalized_shape)
    k = len(normalized_shape)
    if k == 0 or any(d == 0 for d in normalized_shape):
        raise ShapeError("layer_norm: empty normalization group", axis=None)
    if tuple(x.shape[-k:]) != normalized_shape:
        raise ShapeError(
            f"layer_norm: trailing shape {x.shape[-k:]} does not match {normalized_shape}",
            axis=x.ndim - k,
        )
    if gamma.shape != normalized_shape or beta.shape != normalized_shape:
        raise ShapeError("layer_norm: gamma/beta shape must equal the normalized shape", axis=None)

    axes = tuple(range(x.ndim - k, x.ndim))
    m = 1
    for d in normalized_shape:
        m *= d
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def grad(g):
        lead = tuple(range(x.ndim - k))
        ggamma = (g * xhat).sum(axis=lead)
        gbeta = g.sum(axis=lead)
        gxhat = g * gamma.data
        gx = inv * (gxhat - gxhat.mean(axis=axes, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True))
        return gx, ggamma, gbeta

    return make_result("layer_norm", out.astype(x.dtype), (x, gamma, beta), grad)


def global_response_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6,
                         channel_axis: int = 1) -> Tensor:
    """Global response normalization with the residual path included.

    Per sample: ``g_c`` is the spatial L2 norm of channel c,
    ``n_c = g_c / (mean_c g + eps)`` and the result is
    ``gamma * (x * n) + beta + x``. ``channel_axis`` is 1 for NCHW and -1
    for NHWC layouts.
    """
    if x.ndim != 4:
        raise ShapeError(f"global_response_norm expects a rank-4 input, got rank {x.ndim}", axis=None)
    ca = channel_axis % 4
    c = x.shape[ca]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"global_response_norm: gamma/beta must have shape ({c},)", axis=ca)
    spatial = tuple(a for a in (1, 2, 3) if a != ca)
    bshape = [1, 1, 1, 1]
    bshape[ca] = c
    gam = gamma.data.reshape(bshape)
    bet = beta.data.reshape(bshape)

    xd = x.data
    gx = np.sqrt((xd * xd).sum(axis=spatial, keepdims=True))
    denom = gx.mean(axis=ca, keepdims=True) + eps
    nx = gx / denom
    out = gam * (xd * nx) + bet + xd

    def grad(g):
        red = (0,) + spatial
        ggamma = (g * xd * nx).sum(axis=red)
        gbeta = g.sum(axis=red)
        gx_direct = g * (gam * nx + 1.0)
        a = (g * gam * xd).sum(axis=spatial, keepdims=True)  # dL/dn_c
        dg = a / denom - (a * gx).sum(axis=ca, keepdims=True) / (c * denom * denom)
        with np.errstate(divide="ignore", invalid="ignore"):
            dxn = np.where(gx > 0, xd / gx, 0.0)
        return (gx_direct + dg * dxn).astype(xd.dtype), ggamma, gbeta

    return make_result("grn", out.astype(xd.dtype), (x, gamma, beta), grad)


# ---------------------------------------------------------------------------
# probability maps
# ---------------------------------------------------------------------------

def log_softmax_array(z: np.ndarray) -> np.ndarray:
    """Max-shifted log-softmax over the last axis (plain numpy)."""
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_array(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _check_temperature(temperature: float) -> float:
    temperature = float(temperature)
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    return temperature


def softmax_with_temperature(logits: Tensor, temperature: float = 1.0) -> Tensor:
    t = _check_temperature(temperature)
    p = softmax_array(logits.data / np.asarray(t, dtype=logits.dtype))

    def grad(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        return (p * (g - dot) / np.asarray(t, dtype=logits.dtype),)

    return make_result("softmax", p, (logits,), grad)


def log_softmax(logits: Tensor, temperature: float = 1.0) -> Tensor:
    t = _check_temperature(temperature)
    scaled = logits.data / np.asarray(t, dtype=logits.dtype) if t != 1.0 else logits.data
    out = log_softmax_array(scaled)

    def grad(g):
        p = np.exp(out)
        gz = g - p * g.sum(axis=-1, keepdims=True)
        return (gz / np.asarray(t, dtype=logits.dtype) if t != 1.0 else gz,)

    return make_result("log_softmax", out, (logits,), grad)


# ---------------------------------------------------------------------------
# stochastic regularisers
# ---------------------------------------------------------------------------

def _check_drop_rate(p: float) -> float:
    p = float(p)
    if not 0.0 <= p < 1.0:
        raise ValueError(f"drop probability must lie in [0, 1), got {p}")
    return p


def dropout(x: Tensor, p: float, rng: np.random.Generator | None = None, training: bool = True) -> Tensor:
    p = _check_drop_rate(p)
    if not training or p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / np.asarray(1.0 - p, dtype=x.dtype)
    return make_result("dropout", x.data * keep, (x,), lambda g: (g * keep,))


def drop_path(x: Tensor, p: float, rng: np.random.Generator | None = None, training: bool = True) -> Tensor:
    """Zero whole residual branches per sample (stochastic depth)."""
    p = _check_drop_rate(p)
    if not training or p == 0.0:
        return x
    shape = (x.shape[0],) + (1,) * (x.ndim - 1)
    keep = (rng.random(shape) >= p).astype(x.dtype) / np.asarray(1.0 - p, dtype=x.dtype)
    return make_result("drop_path", x.data * keep, (x,), lambda g: (g * keep,))
