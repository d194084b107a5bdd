"""Differentiable primitives over :class:`Tensor`.

Images use NCHW layout. Every convolution and pooling op is stride 1 with
"same" zero padding; strided variants are expressed as ``subsample`` after
the stride-1 op.
"""

from __future__ import annotations

import functools
from typing import Sequence

import numpy as np

from .tensor import Tensor, as_tensor, make


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make(a.data + b.data, (a, b),
                lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make(a.data - b.data, (a, b),
                lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def back(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return make(ad * bd, (a, b), back, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def back(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return make(out, (a, b), back, "div")


def neg(a: Tensor) -> Tensor:
    return make(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a non-differentiable constant."""
    return make(a.data * c, (a,), lambda g: (g * c,), "scale")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return make(ad * ad, (a,), lambda g: (2.0 * ad * g,), "square")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return make(out, (a,), lambda g: (g / ad,), "log")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; clamped entries pass no gradient."""
    inside = (a.data >= lo) & (a.data <= hi)
    return make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(a)), computed without overflow."""
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return make(out, (a,), lambda g: (g * _sigmoid(x),), "softplus")


# -- reductions and shape ----------------------------------------------------

def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), back, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def take(a: Tensor, index) -> Tensor:
    """``a[index]`` for an int, tuple or integer-list index (first axis)."""
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return make(np.array(a.data[index]), (a,), back, "take")


def weighted_sum(weights: Tensor, xs: Sequence[Tensor]) -> Tensor:
    """sum_k weights[k] * xs[k] for a 1-D weight vector and equal-shape maps."""
    wd = weights.data
    stack = np.stack([x.data for x in xs])
    out = np.tensordot(wd, stack, axes=(0, 0))

    def back(g):
        gw = np.tensordot(stack, g, axes=(tuple(range(1, stack.ndim)), tuple(range(g.ndim)))) \
            if weights.requires_grad else None
        return (gw,) + tuple(g * wd[k] if xs[k].requires_grad else None for k in range(len(xs)))

    return make(out, (weights,) + tuple(xs), back, "weighted_sum")


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return make(np.concatenate([t.data for t in tensors], axis=axis), tensors, back, "concat")


def subsample(a: Tensor, stride: int = 2, offset: int = 0) -> Tensor:
    """Keep every ``stride``-th pixel of an NCHW map, starting at ``offset``."""
    shape = a.shape
    sl = (slice(None), slice(None), slice(offset, None, stride), slice(offset, None, stride))

    def back(g):
        out = np.zeros(shape)
        out[sl] = g
        return (out,)

    return make(a.data[sl].copy(), (a,), back, "subsample")


def zeros_like(a: Tensor, stride: int = 1) -> Tensor:
    """Constant zero map; carries no gradient back to ``a``."""
    shape = list(a.shape)
    if stride > 1:
        shape[2] = -(-shape[2] // stride)
        shape[3] = -(-shape[3] // stride)
    return Tensor(np.zeros(shape))


# -- linear algebra ----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def back(g):
        return (g @ bd.T if a.requires_grad else None,
                ad.T @ g if b.requires_grad else None)

    return make(ad @ bd, (a, b), back, "matmul")


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    x = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(x)
    out = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return make(out, (a,), back, "softmax")


def log_softmax(a: Tensor) -> Tensor:
    x = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(x).sum(axis=-1, keepdims=True))
    out = x - lse
    p = np.exp(out)

    def back(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return make(out, (a,), back, "log_softmax")


# -- convolutions ------------------------------------------------------------

def _taps(xp: np.ndarray, k: int, dilation: int, h: int, w: int) -> np.ndarray:
    """Stack the k*k shifted views of a padded map into (N, C, k*k, H, W)."""
    return np.stack([xp[:, :, i * dilation:i * dilation + h, j * dilation:j * dilation + w]
                     for i in range(k) for j in range(k)], axis=2)


def _untaps(cols: np.ndarray, k: int, dilation: int, pad: int, h: int, w: int) -> np.ndarray:
    n, c = cols.shape[:2]
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    t = 0
    for i in range(k):
        for j in range(k):
            out[:, :, i * dilation:i * dilation + h, j * dilation:j * dilation + w] += cols[:, :, t]
            t += 1
    return out[:, :, pad:pad + h, pad:pad + w]


def _pad(x: np.ndarray, pad: int, value: float = 0.0) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=value)


def conv2d(x: Tensor, weight: Tensor, dilation: int = 1) -> Tensor:
    """Dense convolution, weight (O, C, k, k), resolution-preserving padding."""
    n, c, h, w = x.shape
    o, c2, k, k2 = weight.shape
    if c != c2 or k != k2 or k % 2 == 0:
        raise ValueError(f"conv2d shape mismatch: input {x.shape}, weight {weight.shape}")
    pad = dilation * (k - 1) // 2
    if k == 1:
        cols = x.data[:, :, None]
    else:
        cols = _taps(_pad(x.data, pad), k, dilation, h, w)
    wm = weight.data.reshape(o, c, k * k)
    out = np.tensordot(cols, wm, axes=([1, 2], [1, 2])).transpose(0, 3, 1, 2)

    def back(g):
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 3, 4])).reshape(weight.shape) \
            if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.tensordot(g, wm, axes=([1], [0])).transpose(0, 3, 4, 1, 2)
            gx = gcols[:, :, 0] if k == 1 else _untaps(gcols, k, dilation, pad, h, w)
        return gx, gw

    return make(np.ascontiguousarray(out), (x, weight), back, "conv2d")


@functools.lru_cache(maxsize=256)
def _shifts(k: int, dilation: int, h: int, w: int):
    """In-bounds (tap, out_slice, in_slice) triples of a "same"-padded k x k stencil.

    Taps that only ever read padding are skipped, which matters on the tiny
    maps of the desk networks where dilated 5x5 kernels mostly overhang.
    """
    pad = dilation * (k - 1) // 2
    out = []
    for i in range(k):
        oi = i * dilation - pad
        if abs(oi) >= h:
            continue
        for j in range(k):
            oj = j * dilation - pad
            if abs(oj) >= w:
                continue
            dst = (slice(None), slice(None), slice(max(0, -oi), h - max(0, oi)),
                   slice(max(0, -oj), w - max(0, oj)))
            src = (slice(None), slice(None), slice(max(0, oi), h + min(0, oi)),
                   slice(max(0, oj), w + min(0, oj)))
            out.append((i * k + j, dst, src))
    return tuple(out)


def depthwise_conv2d(x: Tensor, weight: Tensor, dilation: int = 1) -> Tensor:
    """Per-channel convolution, weight (C, k, k), resolution-preserving padding."""
    n, c, h, w = x.shape
    c2, k, k2 = weight.shape
    if c != c2 or k != k2 or k % 2 == 0:
        raise ValueError(f"depthwise shape mismatch: input {x.shape}, weight {weight.shape}")
    taps = _shifts(k, dilation, h, w)
    wm = weight.data.reshape(c, k * k)
    xd = x.data
    out = np.zeros(x.shape)
    for t, dst, src in taps:
        out[dst] += xd[src] * wm[:, t, None, None]

    def back(g):
        gw = None
        if weight.requires_grad:
            gw = np.zeros((c, k * k))
            for t, dst, src in taps:
                gw[:, t] = np.einsum("nchw,nchw->c", g[dst], xd[src])
            gw = gw.reshape(weight.shape)
        gx = None
        if x.requires_grad:
            gx = np.zeros(x.shape)
            for t, dst, src in taps:
                gx[src] += g[dst] * wm[:, t, None, None]
        return gx, gw

    return make(out, (x, weight), back, "depthwise_conv2d")


def max_pool3(x: Tensor) -> Tensor:
    """3x3 max with -inf padding; ties route the gradient to the first tap."""
    h, w = x.shape[2:]
    taps = _shifts(3, 1, h, w)
    xd = x.data
    out = np.full(x.shape, -np.inf)
    for _, dst, src in taps:
        np.maximum(out[dst], xd[src], out=out[dst])

    def back(g):
        gx = np.zeros(x.shape)
        taken = np.zeros(x.shape, dtype=bool)
        for _, dst, src in taps:
            hit = (xd[src] == out[dst]) & ~taken[dst]
            taken[dst] |= hit
            gx[src] += np.where(hit, g[dst], 0.0)
        return (gx,)

    return make(out, (x,), back, "max_pool3")


def avg_pool3(x: Tensor) -> Tensor:
    """3x3 mean over the in-bounds neighbours only (padding not counted)."""
    h, w = x.shape[2:]
    taps = _shifts(3, 1, h, w)
    counts = np.zeros((1, 1, h, w))
    total = np.zeros(x.shape)
    for _, dst, src in taps:
        counts[dst] += 1.0
        total[dst] += x.data[src]
    out = total / counts

    def back(g):
        gs = g / counts
        gx = np.zeros(x.shape)
        for _, dst, src in taps:
            gx[src] += gs[dst]
        return (gx,)

    return make(out, (x,), back, "avg_pool3")


# -- normalization -----------------------------------------------------------

def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, *, groups: int = 1,
               running: tuple[np.ndarray, np.ndarray] | None = None,
               eps: float = 1e-5) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Affine batch normalization over every axis except channels (axis 1).

    With ``running=(mean, var)`` the given statistics are used (inference).
    Otherwise statistics come from the batch, computed separately for each of
    ``groups`` equal contiguous slices of the batch so that several stacked
    Monte-Carlo passes stay independent. Returns the output and the batch
    mean/variance averaged over groups.
    """
    xd = x.data
    c = xd.shape[1]
    bshape = (1, c) + (1,) * (xd.ndim - 2)
    gd, bd = gamma.data.reshape(bshape), beta.data.reshape(bshape)
    red = (0,) + tuple(range(2, xd.ndim))

    if running is not None:
        mu, var = running
        inv = 1.0 / np.sqrt(var.reshape(bshape) + eps)
        xhat = (xd - mu.reshape(bshape)) * inv
        out = gd * xhat + bd

        def back_eval(g):
            return (g * gd * inv if x.requires_grad else None,
                    (g * xhat).sum(axis=red) if gamma.requires_grad else None,
                    g.sum(axis=red) if beta.requires_grad else None)

        return make(out, (x, gamma, beta), back_eval, "batch_norm"), mu, var

    n = xd.shape[0]
    if n % groups:
        raise ValueError(f"batch of {n} not divisible into {groups} groups")
    xg = xd.reshape((groups, n // groups) + xd.shape[1:])
    gred = (1,) + tuple(range(3, xg.ndim))
    mu = xg.mean(axis=gred, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=gred, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat_g = xc * inv
    xhat = xhat_g.reshape(xd.shape)
    out = gd * xhat + bd
    m = xg.size // (groups * c)

    def back(g):
        gx = None
        if x.requires_grad:
            dxhat = (g * gd).reshape(xg.shape)
            gx = (inv / m) * (m * dxhat - dxhat.sum(axis=gred, keepdims=True)
                              - xhat_g * (dxhat * xhat_g).sum(axis=gred, keepdims=True))
            gx = gx.reshape(xd.shape)
        return (gx,
                (g * xhat).sum(axis=red) if gamma.requires_grad else None,
                g.sum(axis=red) if beta.requires_grad else None)

    batch_mu = mu.reshape(groups, c).mean(axis=0)
    batch_var = var.reshape(groups, c).mean(axis=0)
    return make(out, (x, gamma, beta), back, "batch_norm"), batch_mu, batch_var
