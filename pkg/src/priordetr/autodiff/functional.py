"""Differentiable operations on :class:`Tensor`.

Each op computes its forward value with numpy and registers a backward
closure.  Gradients w.r.t. broadcast operands are summed back to the operand
shape.
"""
from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

from .. import _kernels
from .tensor import Tensor, as_tensor, make_result


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(a: np.ndarray, b: np.ndarray, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(
            f"{op}: shapes {a.shape} and {b.shape} are not broadcastable "
            "(trailing dimensions must match or be 1)"
        ) from None


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a.data, b.data, "add")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return make_result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a.data, b.data, "sub")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return make_result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a.data, b.data, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a.data, b.data, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    if isinstance(exponent, Tensor):
        raise TypeError("power() supports scalar exponents only")
    x = a.data
    out = x ** exponent

    def backward(g):
        return (g * exponent * x ** (exponent - 1),)

    return make_result(out, (a,), backward, "power")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    x = a.data
    return make_result(np.log(x), (a,), lambda g: (g / x,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return make_result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = _pair(a, b)
    _broadcast_shape(a.data, b.data, "maximum")
    pick_a = a.data >= b.data

    def backward(g):
        return (_unbroadcast(np.where(pick_a, g, 0.0), a.shape),
                _unbroadcast(np.where(pick_a, 0.0, g), b.shape))

    return make_result(np.maximum(a.data, b.data), (a, b), backward, "maximum")


def minimum(a, b) -> Tensor:
    """Elementwise min; ties send the gradient to ``a``."""
    a, b = _pair(a, b)
    _broadcast_shape(a.data, b.data, "minimum")
    pick_a = a.data <= b.data

    def backward(g):
        return (_unbroadcast(np.where(pick_a, g, 0.0), a.shape),
                _unbroadcast(np.where(pick_a, 0.0, g), b.shape))

    return make_result(np.minimum(a.data, b.data), (a, b), backward, "minimum")


def clamp(a: Tensor, lo, hi, straight_through: bool = False) -> Tensor:
    """Clip ``a`` to ``[lo, hi]`` (bounds may be arrays, not differentiated).

    The gradient is zero wherever the value was clipped unless
    ``straight_through`` is set, in which case it passes unchanged.
    """
    lo = lo.data if isinstance(lo, Tensor) else lo
    hi = hi.data if isinstance(hi, Tensor) else hi
    x = a.data
    out = np.minimum(np.maximum(x, lo), hi)
    if straight_through:
        return make_result(out, (a,), lambda g: (g,), "clamp")
    inside = (x >= lo) & (x <= hi)

    def backward(g):
        return (np.where(inside, g, 0.0).astype(g.dtype, copy=False),)

    return make_result(out, (a,), backward, "clamp")


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return make_result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split on sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def log_sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    s = _sigmoid(x)
    return make_result(out, (a,), lambda g: (g * (1.0 - s),), "log_sigmoid")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return make_result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return make_result(out, (a,), backward, "gelu")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (a,), backward, "softmax")


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return make_result(np.asarray(out), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    return sum(a, axis=axes, keepdims=keepdims) * (1.0 / count)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    out = a.data.reshape(shape)
    return make_result(out, (a,), lambda g: (g.reshape(src),), "reshape")


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = a.data.transpose(axes)
    return make_result(out, (a,), lambda g: (g.transpose(inv),), "permute")


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    out = a.data.swapaxes(i, j)
    return make_result(out, (a,), lambda g: (g.swapaxes(i, j),), "swapaxes")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis)))
               for i in items)


def getitem(a: Tensor, index) -> Tensor:
    if isinstance(index, Tensor):
        index = index.data
    if isinstance(index, tuple):
        index = tuple(i.data if isinstance(i, Tensor) else i for i in index)
    out = a.data[index]
    shape, dtype = a.shape, a.dtype
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return make_result(np.array(out, copy=True), (a,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_result(out, tensors, backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return make_result(out, tensors, backward, "stack")


def pad2d(a: Tensor, padding: int) -> Tensor:
    p = padding
    out = np.pad(a.data, ((0, 0), (0, 0), (p, p), (p, p)))
    h, w = a.shape[-2:]
    return make_result(out, (a,), lambda g: (g[..., p:p + h, p:p + w],), "pad2d")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs >=2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(
            f"matmul: inner dimensions differ ({a.shape[-1]} vs {b.shape[-2]})"
        )
    ad, bd = a.data, b.data
    out = ad @ bd

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return make_result(out, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` shaped (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(
            f"linear: input features {x.shape[-1]} != weight in-features "
            f"{weight.shape[1]}"
        )
    xd, wd = x.data, weight.data
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, xd.shape[-1])
    out = x2 @ wd.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(*lead, wd.shape[0])

    def backward(g):
        g2 = g.reshape(-1, wd.shape[0])
        gx = (g2 @ wd).reshape(xd.shape) if x.requires_grad else None
        gw = g2.T @ x2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward, "linear")


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def layer_norm(x: Tensor, weight: Optional[Tensor], bias: Optional[Tensor],
               eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the optional affine map."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat
    if weight is not None:
        out = out * weight.data
    if bias is not None:
        out = out + bias.data
    def backward(g):
        gxhat = g * weight.data if weight is not None else g
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        grads = [gx]
        lead = tuple(range(xd.ndim - 1))
        if weight is not None:
            grads.append((g * xhat).sum(axis=lead))
        if bias is not None:
            grads.append(g.sum(axis=lead))
        return grads

    parents = [x] + [p for p in (weight, bias) if p is not None]
    return make_result(out, parents, backward, "layer_norm")


def batch_norm(x: Tensor, weight: Optional[Tensor], bias: Optional[Tensor],
               running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Batch normalization over axis 1 of (N, C, ...) inputs.

    In training mode batch statistics are used and the running buffers are
    updated in place; in eval mode the op is affine in ``x``.
    """
    xd = x.data
    axes = (0,) + tuple(range(2, xd.ndim))
    bshape = (1, -1) + (1,) * (xd.ndim - 2)
    if training:
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        count = xd.size // xd.shape[1]
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * count / max(count - 1, 1)
    else:
        mu, var = running_mean, running_var
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype).reshape(bshape)
    xhat = (xd - mu.astype(xd.dtype).reshape(bshape)) * inv
    out = xhat
    if weight is not None:
        out = out * weight.data.reshape(bshape)
    if bias is not None:
        out = out + bias.data.reshape(bshape)

    def backward(g):
        gxhat = g * weight.data.reshape(bshape) if weight is not None else g
        if training:
            gx = inv * (gxhat - gxhat.mean(axis=axes, keepdims=True)
                        - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True))
        else:
            gx = gxhat * inv
        grads = [gx]
        if weight is not None:
            grads.append((g * xhat).sum(axis=axes))
        if bias is not None:
            grads.append(g.sum(axis=axes))
        return grads

    parents = [x] + [p for p in (weight, bias) if p is not None]
    return make_result(out, parents, backward, "batch_norm")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _windows(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(N, C, Ho, Wo, k, k) strided view of a padded NCHW array."""
    view = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    return view[:, :, : (ho - 1) * stride + 1: stride, : (wo - 1) * stride + 1: stride]


def _col2im(gcols: np.ndarray, shape_p: tuple, k: int, stride: int) -> np.ndarray:
    """Scatter-add (N, C, Ho, Wo, k, k) window gradients into a padded array."""
    n, c, ho, wo = gcols.shape[:4]
    out = np.zeros(shape_p, dtype=gcols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i: i + stride * (ho - 1) + 1: stride,
                j: j + stride * (wo - 1) + 1: stride] += gcols[..., i, j]
    return out


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """Grouped 2-D cross-correlation, NCHW input and (O, C/groups, k, k) kernel."""
    if x.ndim != 4:
        raise ValueError(f"conv2d expects NCHW input, got rank {x.ndim}")
    n, c, h, w = x.shape
    o, cg, k, k2 = weight.shape
    if k != k2:
        raise ValueError(f"conv2d: kernel must be square, got {k}x{k2}")
    if c % groups:
        raise ValueError(f"conv2d: input channels {c} not divisible by groups {groups}")
    if o % groups:
        raise ValueError(f"conv2d: output channels {o} not divisible by groups {groups}")
    if cg != c // groups:
        raise ValueError(
            f"conv2d: kernel in-channels {cg} != input channels {c} / groups {groups}"
        )
    if h + 2 * padding < k:
        raise ValueError(f"conv2d: padded height {h + 2 * padding} < kernel {k}")
    if w + 2 * padding < k:
        raise ValueError(f"conv2d: padded width {w + 2 * padding} < kernel {k}")
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)
    og = o // groups
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
        if padding else x.data
    win = _windows(xp, k, stride, ho, wo)  # N C Ho Wo k k
    # -> G, N*Ho*Wo, Cg*k*k
    cols = win.reshape(n, groups, cg, ho, wo, k, k).transpose(1, 0, 3, 4, 2, 5, 6)
    cols = np.ascontiguousarray(cols).reshape(groups, n * ho * wo, cg * k * k)
    wmat = weight.data.reshape(groups, og, cg * k * k).transpose(0, 2, 1)
    out = cols @ wmat  # G, NHW, Og
    out = out.reshape(groups, n, ho, wo, og).transpose(1, 0, 4, 2, 3).reshape(n, o, ho, wo)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out)
    shape_p = xp.shape

    def backward(g):
        gm = g.reshape(n, groups, og, ho, wo).transpose(1, 0, 3, 4, 2)
        gm = gm.reshape(groups, n * ho * wo, og)
        gx = gw = None
        if x.requires_grad:
            gcols = gm @ wmat.transpose(0, 2, 1)  # G, NHW, Cg*k*k
            gcols = gcols.reshape(groups, n, ho, wo, cg, k, k).transpose(1, 0, 4, 2, 3, 5, 6)
            gcols = gcols.reshape(n, c, ho, wo, k, k)
            gxp = _col2im(gcols, shape_p, k, stride)
            gx = gxp[:, :, padding: padding + h, padding: padding + w] if padding else gxp
        if weight.requires_grad:
            gw = (cols.transpose(0, 2, 1) @ gm)  # G, Cg*k*k, Og
            gw = gw.transpose(0, 2, 1).reshape(o, cg, k, k)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward, "conv2d")


def unfold(x: Tensor, k: int, padding: int = 0) -> Tensor:
    """Stride-1 sliding windows: (N, C, H, W) -> (N, C, k*k, Ho, Wo)."""
    n, c, h, w = x.shape
    ho = conv_output_size(h, k, 1, padding)
    wo = conv_output_size(w, k, 1, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
        if padding else x.data
    win = _windows(xp, k, 1, ho, wo)
    out = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c, k * k, ho, wo)
    shape_p = xp.shape

    def backward(g):
        gcols = g.reshape(n, c, k, k, ho, wo).transpose(0, 1, 4, 5, 2, 3)
        gxp = _col2im(gcols, shape_p, k, 1)
        return (gxp[:, :, padding: padding + h, padding: padding + w] if padding else gxp,)

    return make_result(out, (x,), backward, "unfold")


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def bilinear_sample(feature: Tensor, locations: Tensor) -> Tensor:
    """Bilinear gather with zero padding outside the map.

    ``feature`` is (N, C, H, W); ``locations`` is (N, G, P, 2) holding (x, y)
    in pixel coordinates, where integer values hit pixel centers.  Channels
    are split into G contiguous groups, group g reading its own P points.
    Returns (N, C, P).  Differentiable w.r.t. both feature and locations.
    """
    n, c, h, w = feature.shape
    if locations.ndim != 4 or locations.shape[-1] != 2 or locations.shape[0] != n:
        raise ValueError(
            f"bilinear_sample: locations must be (N={n}, G, P, 2), got {locations.shape}"
        )
    groups = locations.shape[1]
    if c % groups:
        raise ValueError(f"bilinear_sample: channels {c} not divisible by groups {groups}")
    cg = c // groups
    fd = np.ascontiguousarray(feature.data.reshape(n * groups, cg, h, w))
    ld = np.ascontiguousarray(
        locations.data.reshape(n * groups, -1, 2).astype(fd.dtype, copy=False))
    out = _kernels.bilinear_forward(fd, ld)  # NG, Cg, P
    p = ld.shape[1]

    def backward(g):
        gd = np.ascontiguousarray(g.reshape(n * groups, cg, p))
        gf, gl = _kernels.bilinear_backward(gd, fd, ld)
        gf = gf.reshape(feature.shape) if feature.requires_grad else None
        gl = gl.reshape(locations.shape).astype(locations.dtype, copy=False) \
            if locations.requires_grad else None
        return gf, gl

    return make_result(out.reshape(n, c, p), (feature, locations), backward,
                       "bilinear_sample")
