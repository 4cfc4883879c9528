"""Kernel set over :class:`Tensor` with analytic backward rules.

Elementwise binary ops follow numpy broadcasting; gradients are summed back to
each operand's shape. Spatial ops use channel-last ``(H, W, D)`` layout, with an
optional leading stack axis ``(S, H, W, D)`` for several grids at once.
"""

from __future__ import annotations

from functools import lru_cache
from typing import Sequence

import numpy as np

from .tensor import DimensionError, NumericError, Tensor, _tally, make_node

GELU_C = float(np.sqrt(2.0 / np.pi))
GELU_A = 0.044715


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, name: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{name}: cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return make_node(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return make_node(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return make_node(ad * bd, (a, b), bw, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return make_node(out, (a, b), bw, "div")


def scale(x: Tensor, c: float) -> Tensor:
    return make_node(x.data * c, (x,), lambda g: (g * c,), "scale")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_node(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return make_node(np.log(xd), (x,), lambda g: (g / xd,), "log")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return make_node(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return make_node(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def gelu(x: Tensor) -> Tensor:
    """GeLU, tanh approximation."""
    xd = x.data
    t = np.tanh(GELU_C * (xd + GELU_A * (xd * xd * xd)))
    out = 0.5 * xd * (1.0 + t)
    _tally("gelu", xd.size)

    def bw(g):
        du = GELU_C * (1.0 + 3.0 * GELU_A * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du),)

    return make_node(out, (x,), bw, "gelu")


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy of sigmoid(logits) against fixed targets."""
    z = logits.data
    t = np.asarray(targets, dtype=z.dtype)
    if t.shape != z.shape:
        raise DimensionError(f"bce: logits {z.shape} vs targets {t.shape}")
    out = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    return make_node(out, (logits,), lambda g: (g * (_sigmoid(z) - t),), "bce")


# ---------------------------------------------------------------- reductions

def sum(x: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape
    out = np.asarray(np.sum(x.data, axis=axis, keepdims=keepdims))
    full = out.ndim == 0

    def bw(g):
        if full:
            g = g.reshape(())
        elif axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_node(out, (x,), bw, "sum")


def mean(x: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------- structure

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    out = x.data.reshape(shape)
    return make_node(out, (x,), lambda g: (g.reshape(src),), "reshape")


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "permute")


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got {x.shape}")
    return permute(x, (1, 0))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    if not xs:
        raise DimensionError("concat of an empty list")
    ref = list(xs[0].shape)
    for x in xs[1:]:
        other = list(x.shape)
        if len(other) != len(ref) or any(o != r for i, (o, r) in enumerate(zip(other, ref)) if i != axis % len(ref)):
            raise DimensionError(f"concat: {xs[0].shape} vs {x.shape} along axis {axis}")
    sizes = [x.shape[axis] for x in xs]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([x.data for x in xs], axis=axis)
    return make_node(out, xs, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def index(x: Tensor, key) -> Tensor:
    """numpy indexing; repeated fancy indices accumulate their gradients."""
    shape = x.shape
    out = np.array(x.data[key])

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, key, g)
        return (full,)

    return make_node(out, (x,), bw, "index")


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    _tally("matmul", 2 * ad.shape[0] * ad.shape[1] * bd.shape[1])
    return make_node(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Row-wise ``x @ weight + bias`` over the last axis of ``x``."""
    d_in, d_out = weight.shape
    if x.shape[-1] != d_in:
        raise DimensionError(f"linear: input trailing dim {x.shape} does not match weight {weight.shape}")
    if bias is not None and bias.shape != (d_out,):
        raise DimensionError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, d_in)
    wd = weight.data
    out = x2 @ wd
    if bias is not None:
        out = out + bias.data
    _tally("linear", 2 * x2.shape[0] * d_in * d_out)

    def bw(g):
        g2 = g.reshape(-1, d_out)
        grads = [(g2 @ wd.T).reshape(x.shape), x2.T @ g2]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out.reshape(*lead, d_out), parents, bw, "linear")


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis, stabilized by subtracting the row max."""
    xd = x.data
    if xd.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got {x.shape}")
    if not np.all(np.isfinite(xd)):
        raise NumericError("softmax_rows: non-finite input")
    e = np.exp(xd - xd.max(axis=1, keepdims=True))
    out = e / e.sum(axis=1, keepdims=True)
    _tally("softmax", xd.size)

    def bw(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return make_node(out, (x,), bw, "softmax")


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero-mean, unit-variance rows along the last axis; no affine parameters."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    out = xc * inv
    _tally("layer_norm", xd.size)

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * out).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - out * gy),)

    return make_node(out, (x,), bw, "layer_norm")


# ---------------------------------------------------------------- spatial

def depthwise_conv(x: Tensor, kernel: Tensor) -> Tensor:
    """Per-channel k x k cross-correlation, stride 1, zero "same" padding.

    ``x`` is (H, W, D) or (S, H, W, D); ``kernel`` is (k, k, D) with k odd.
    """
    kd = kernel.data
    if kd.ndim != 3 or kd.shape[0] != kd.shape[1] or kd.shape[0] % 2 == 0:
        raise DimensionError(f"depthwise_conv: kernel must be (k, k, D) with odd k, got {kernel.shape}")
    if x.data.ndim not in (3, 4) or x.shape[-1] != kd.shape[2]:
        raise DimensionError(f"depthwise_conv: input {x.shape} vs kernel {kernel.shape}")
    k = kd.shape[0]
    r = k // 2
    xd = x.data
    H, W = xd.shape[-3], xd.shape[-2]
    pad = [(0, 0)] * (xd.ndim - 3) + [(r, r), (r, r), (0, 0)]
    xp = np.pad(xd, pad)
    out = np.zeros_like(xd)
    for i in range(k):
        for j in range(k):
            out += xp[..., i:i + H, j:j + W, :] * kd[i, j]
    _tally("dwconv", 2 * k * k * xd.size)

    def bw(g):
        gxp = np.zeros_like(xp)
        gk = np.empty_like(kd)
        red = tuple(range(g.ndim - 1))
        for i in range(k):
            for j in range(k):
                gxp[..., i:i + H, j:j + W, :] += g * kd[i, j]
                gk[i, j] = (xp[..., i:i + H, j:j + W, :] * g).sum(axis=red)
        return gxp[..., r:r + H, r:r + W, :], gk

    return make_node(out, (x, kernel), bw, "dwconv")


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel mean over the (H, W) axes, kept as size-1 dims."""
    if x.data.ndim not in (3, 4):
        raise DimensionError(f"global_avg_pool expects (H, W, D) or (S, H, W, D), got {x.shape}")
    return mean(x, axis=(-3, -2), keepdims=True)


@lru_cache(maxsize=64)
def _interp_matrix(n_in: int, n_out: int, dtype: str) -> np.ndarray:
    # half-pixel centers, edge clamped
    m = np.zeros((n_out, n_in), dtype=dtype)
    for o in range(n_out):
        src = min(max((o + 0.5) * n_in / n_out - 0.5, 0.0), n_in - 1)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        w = src - i0
        m[o, i0] += 1.0 - w
        m[o, i1] += w
    m.setflags(write=False)
    return m


def upsample_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of an (H, W, C) map."""
    if x.data.ndim != 3:
        raise DimensionError(f"upsample_bilinear expects (H, W, C), got {x.shape}")
    H, W, _ = x.shape
    uh = _interp_matrix(H, out_h, x.dtype.name)
    uw = _interp_matrix(W, out_w, x.dtype.name)
    xd = x.data
    out = np.einsum("oh,hwc->owc", uh, xd, optimize=True)
    out = np.einsum("pw,owc->opc", uw, out, optimize=True)
    _tally("upsample", 2 * out.size * (H + W))

    def bw(g):
        t = np.einsum("pw,opc->owc", uw, g, optimize=True)
        return (np.einsum("oh,owc->hwc", uh, t, optimize=True),)

    return make_node(out, (x,), bw, "upsample")


def space_to_depth(x: Tensor, s: int) -> Tensor:
    """(H, W, C) -> (H/s, W/s, s*s*C); each output cell holds its s x s input patch."""
    H, W, C = x.shape
    if H % s or W % s:
        raise DimensionError(f"space_to_depth: {x.shape} not divisible by {s}")
    y = reshape(x, (H // s, s, W // s, s, C))
    y = permute(y, (0, 2, 1, 3, 4))
    return reshape(y, (H // s, W // s, s * s * C))
