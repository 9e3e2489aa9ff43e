"""Differentiable operations over :class:`Tensor`.

Elementwise binary ops require identical shapes; replication is explicit via
:func:`broadcast_to`. Reductions accumulate in float64 and cast back.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from . import kernels
from .tensor import ConfigurationError, DimensionError, Tensor, from_op


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _same_shape(a, b, "add")
    return from_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _same_shape(a, b, "sub")
    return from_op(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return from_op(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _same_shape(a, b, "div")
    ad, bd = a.data, b.data
    return from_op(ad / bd, (a, b), lambda g: (g / bd, -g * ad / (bd * bd)), "div")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return from_op(x.data * x.data.dtype.type(c), (x,), lambda g: (g * g.dtype.type(c),), "scale")


def add_scalar(x: Tensor, c: float) -> Tensor:
    return from_op(x.data + x.data.dtype.type(c), (x,), lambda g: (g,), "add_scalar")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return from_op(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    xd = x.data
    dt = xd.dtype.type
    x2 = xd * xd
    u = dt(_GELU_C) * (xd + dt(0.044715) * x2 * xd)
    th = np.tanh(u)
    out = dt(0.5) * xd * (dt(1) + th)

    def bw(g):
        du = dt(_GELU_C) * (dt(1) + dt(3 * 0.044715) * x2)
        d = dt(0.5) * (dt(1) + th) + dt(0.5) * xd * (dt(1) - th * th) * du
        return (g * d,)

    return from_op(out, (x,), bw, "gelu")


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1 / (1 + e), e / (1 + e)).astype(xd.dtype)
    return from_op(out, (x,), lambda g: (g * out * (1 - out),), "sigmoid")


def softplus(x: Tensor) -> Tensor:
    """log(1 + e^x) in the overflow-free form max(x, 0) + log1p(e^-|x|)."""
    xd = x.data
    with np.errstate(over="ignore"):
        out = (np.maximum(xd, 0) + np.log1p(np.exp(-np.abs(xd)))).astype(xd.dtype)

    def bw(g):
        e = np.exp(-np.abs(xd))
        s = np.where(xd >= 0, 1 / (1 + e), e / (1 + e)).astype(xd.dtype)
        return (g * s,)

    return from_op(out, (x,), bw, "softplus")


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {src} as {tuple(shape)}") from exc
    return from_op(out, (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return from_op(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),), "transpose")


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def index(x: Tensor, idx) -> Tensor:
    """Basic (slice/integer) indexing."""
    src_shape = x.shape
    out = np.array(x.data[idx], copy=True)

    def bw(g):
        full = np.zeros(src_shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return from_op(out, (x,), bw, "index")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [_t(x) for x in xs]
    ax = axis % xs[0].ndim
    for x in xs[1:]:
        if x.ndim != xs[0].ndim or any(x.shape[i] != xs[0].shape[i] for i in range(x.ndim) if i != ax):
            raise DimensionError(f"concat: incompatible shapes {[t.shape for t in xs]} on axis {axis}")
    sizes = [x.shape[ax] for x in xs]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([x.data for x in xs], axis=ax)

    def bw(g):
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(int(lo), int(hi))
            parts.append(g[tuple(sl)])
        return parts

    return from_op(out, xs, bw, "concat")


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [_t(x) for x in xs]
    expanded = [reshape(x, x.shape[:axis] + (1,) + x.shape[axis:]) for x in xs]
    return concat(expanded, axis=axis)


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit replication; the gradient sums over replicated axes."""
    shape = tuple(shape)
    src = x.shape
    if len(src) != len(shape) or any(s != 1 and s != t for s, t in zip(src, shape)):
        raise DimensionError(f"broadcast_to: cannot broadcast {src} to {shape}")
    axes = tuple(i for i, (s, t) in enumerate(zip(src, shape)) if s == 1 and t != 1)
    out = np.ascontiguousarray(np.broadcast_to(x.data, shape))

    def bw(g):
        if not axes:
            return (g,)
        return (g.sum(axis=axes, keepdims=True, dtype=np.float64).astype(g.dtype),)

    return from_op(out, (x,), bw, "broadcast_to")


def pad2d(x: Tensor, pad_h: int, pad_w: int) -> Tensor:
    """Zero-pad the two leading axes of an [h, w, ...] tensor at the far end."""
    if pad_h == 0 and pad_w == 0:
        return x
    h, w = x.shape[0], x.shape[1]
    widths = [(0, pad_h), (0, pad_w)] + [(0, 0)] * (x.ndim - 2)
    out = np.pad(x.data, widths)
    return from_op(out, (x,), lambda g: (g[:h, :w],), "pad2d")


# ---------------------------------------------------------------- reductions


def sum_all(x: Tensor) -> Tensor:
    dt = x.dtype
    out = np.asarray(x.data.sum(dtype=np.float64), dtype=dt)
    shape = x.shape
    return from_op(out, (x,), lambda g: (np.full(shape, g, dtype=dt),), "sum")


def mean_all(x: Tensor) -> Tensor:
    dt = x.dtype
    n = x.size
    out = np.asarray(x.data.sum(dtype=np.float64) / n, dtype=dt)
    shape = x.shape
    return from_op(out, (x,), lambda g: (np.full(shape, g / n, dtype=dt),), "mean")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product; leading (batch) extents must agree exactly."""
    a, b = _t(a), _t(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return from_op(ad @ bd, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x[..., in] -> x @ weight.T + bias, weight [out, in], bias [out]."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} vs weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: bias {bias.shape} vs weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gx = g @ wd if x.requires_grad else None
        g2 = g.reshape(-1, g.shape[-1])
        gw = g2.T @ xd.reshape(-1, xd.shape[-1]) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        gb = g2.sum(axis=0, dtype=np.float64).astype(g.dtype) if bias.requires_grad else None
        return gx, gw, gb

    return from_op(out, parents, bw, "linear")


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis with max subtraction."""
    xd = x.data
    z = xd - xd.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return from_op(y, (x,), bw, "softmax")


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layernorm: affine {gamma.shape}/{beta.shape} vs feature dim {d}")
    xd = x.data
    dt = xd.dtype
    x64 = xd.astype(np.float64)
    mu = x64.mean(axis=-1, keepdims=True)
    var = ((x64 - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((x64 - mu) * inv).astype(dt)
    out = xhat * gamma.data + beta.data
    inv_t = inv.astype(dt)

    def bw(g):
        gx = ggam = gbet = None
        if x.requires_grad:
            dxh = g * gamma.data
            gx = (dxh - dxh.mean(axis=-1, keepdims=True) - xhat * (dxh * xhat).mean(axis=-1, keepdims=True)) * inv_t
        if gamma.requires_grad:
            ggam = (g * xhat).reshape(-1, d).sum(axis=0, dtype=np.float64).astype(g.dtype)
        if beta.requires_grad:
            gbet = g.reshape(-1, d).sum(axis=0, dtype=np.float64).astype(g.dtype)
        return gx, ggam, gbet

    return from_op(out, (x, gamma, beta), bw, "layernorm")


# ---------------------------------------------------------------- spatial


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of x[c_in, h, w] with kernel[c_out, c_in, k, k]."""
    if x.ndim != 3 or kernel.ndim != 4 or kernel.shape[1] != x.shape[0]:
        raise DimensionError(f"conv2d: input {x.shape} vs kernel {kernel.shape}")
    cout, cin, kh, kw = kernel.shape
    _, h, w = x.shape
    num_h, num_w = h + 2 * pad - kh, w + 2 * pad - kw
    if num_h < 0 or num_w < 0 or num_h % stride or num_w % stride:
        raise DimensionError(f"conv2d: output extent not integral for input {x.shape}, k={kh}, stride={stride}, pad={pad}")
    oh, ow = num_h // stride + 1, num_w // stride + 1
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = kernels.im2col(xp, kh, kw, stride, oh, ow)  # [oh*ow, cin*kh*kw]
    kmat = kernel.data.reshape(cout, -1)
    out = (cols @ kmat.T).T.reshape(cout, oh, ow)
    if bias is not None:
        out = out + bias.data[:, None, None]
    out = np.ascontiguousarray(out)
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def bw(g):
        g2 = g.reshape(cout, -1)
        gx = gk = None
        if x.requires_grad:
            dcols = g2.T @ kmat
            dxp = kernels.col2im(dcols, xp.shape, kh, kw, stride, oh, ow)
            gx = dxp[:, pad : pad + h, pad : pad + w] if pad else dxp
        if kernel.requires_grad:
            gk = (g2 @ cols).reshape(kernel.shape)
        if bias is None:
            return gx, gk
        gb = g2.sum(axis=1, dtype=np.float64).astype(g.dtype) if bias.requires_grad else None
        return gx, gk, gb

    return from_op(out, parents, bw, "conv2d")


def conv_transpose2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 2) -> Tensor:
    """Transposed convolution for the non-overlapping case k == stride.

    x[c_in, h, w], kernel[c_in, c_out, k, k] -> [c_out, h*k, w*k].
    """
    if x.ndim != 3 or kernel.ndim != 4 or kernel.shape[0] != x.shape[0]:
        raise DimensionError(f"conv_transpose2d: input {x.shape} vs kernel {kernel.shape}")
    cin, cout, kh, kw = kernel.shape
    if kh != stride or kw != stride:
        raise ConfigurationError(f"conv_transpose2d: only k == stride is supported (k={kh}x{kw}, stride={stride})")
    _, h, w = x.shape
    s = stride
    xmat = x.data.reshape(cin, h * w).T  # [h*w, cin]
    kmat = kernel.data.reshape(cin, cout * s * s)
    y = (xmat @ kmat).reshape(h, w, cout, s, s)
    out = y.transpose(2, 0, 3, 1, 4).reshape(cout, h * s, w * s)
    if bias is not None:
        out = out + bias.data[:, None, None]
    out = np.ascontiguousarray(out)
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def bw(g):
        gy = g.reshape(cout, h, s, w, s).transpose(1, 3, 0, 2, 4).reshape(h * w, cout * s * s)
        gx = (gy @ kmat.T).T.reshape(cin, h, w) if x.requires_grad else None
        gk = (xmat.T @ gy).reshape(kernel.shape) if kernel.requires_grad else None
        if bias is None:
            return gx, gk
        gb = g.reshape(cout, -1).sum(axis=1, dtype=np.float64).astype(g.dtype) if bias.requires_grad else None
        return gx, gk, gb

    return from_op(out, parents, bw, "conv_transpose2d")


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row i holds the align-corners=false bilinear weights for output i."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        m[i, i0] += 1.0 - lam
        m[i, i1] += lam
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resampling of x[c, h, w] (align_corners=False)."""
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"bilinear_resize: bad target extent {out_h}x{out_w}")
    c, h, w = x.shape
    if (h, w) == (out_h, out_w):
        return from_op(x.data.copy(), (x,), lambda g: (g,), "bilinear_resize")
    ry = _interp_matrix(h, out_h).astype(x.dtype)
    rx = _interp_matrix(w, out_w).astype(x.dtype)
    out = np.ascontiguousarray((ry @ x.data) @ rx.T)

    def bw(g):
        return ((ry.T @ g) @ rx,)

    return from_op(out, (x,), bw, "bilinear_resize")
