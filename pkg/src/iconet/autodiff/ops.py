"""Differentiable operations on :class:`Tensor`.

Shapes are checked strictly. The only broadcasts are the documented ones:
bias addition inside ``linear``/``conv2d``, python scalars, and the
per-channel gate of ``channel_scale``.
"""

from __future__ import annotations

import builtins
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor, fault_sign, make_result

_Scalar = (int, float, np.floating, np.integer)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    if isinstance(b, _Scalar):
        a = as_tensor(a)
        return make_result(a.data + a.dtype.type(b), (a,), lambda g: (g,), "add_scalar")
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return make_result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    if isinstance(b, _Scalar):
        return add(a, -b)
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("sub", a, b)
    return make_result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, s: float) -> Tensor:
    s = a.dtype.type(s)
    return make_result(a.data * s, (a,), lambda g: (g * s,), "scale")


def mul(a, b) -> Tensor:
    if isinstance(b, _Scalar):
        return scale(as_tensor(a), b)
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return make_result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    return make_result(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return make_result(np.asarray(a.data.mean()), (a,), lambda g: (np.full(shape, g / n, dtype=g.dtype),), "mean")


# ---------------------------------------------------------------------------
# shape plumbing
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    out = a.data.reshape(tuple(shape))
    return make_result(out, (a,), lambda g: (g.reshape(old),), "reshape")


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ValueError(f"permute: {axes} is not a permutation of {a.ndim} axes")
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return make_result(out, (a,), lambda g: (np.ascontiguousarray(g.transpose(inv)),), "permute")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    axis = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis):
            raise ValueError(f"concat: incompatible shapes {ref} and {t.shape} along axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors)))

    return make_result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def slice_axis(a: Tensor, start: int, stop: int, axis: int) -> Tensor:
    axis = axis % a.ndim
    if not 0 <= start < stop <= a.shape[axis]:
        raise ValueError(f"slice_axis: [{start}, {stop}) out of range for extent {a.shape[axis]}")
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return make_result(np.ascontiguousarray(a.data[index]), (a,), backward, "slice")


def split(a: Tensor, sizes: Sequence[int], axis: int) -> list:
    if builtins.sum(sizes) != a.shape[axis]:
        raise ValueError(f"split: sizes {list(sizes)} do not cover extent {a.shape[axis]}")
    out, start = [], 0
    for s in sizes:
        out.append(slice_axis(a, start, start + s, axis))
        start += s
    return out


def take(a: Tensor, indices, axis: int) -> Tensor:
    """Gather along ``axis`` with an integer index vector (repeats allowed)."""
    idx = np.asarray(indices, dtype=np.intp)
    axis = axis % a.ndim
    if idx.ndim != 1 or idx.size == 0:
        raise ValueError("take: indices must be a non-empty vector")
    if idx.min() < 0 or idx.max() >= a.shape[axis]:
        raise IndexError(f"take: index out of range for extent {a.shape[axis]}")
    shape = a.shape
    unique = np.unique(idx).size == idx.size

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        moved = np.moveaxis(full, axis, 0)
        gm = np.moveaxis(g, axis, 0)
        if unique:
            moved[idx] = gm
        else:
            np.add.at(moved, idx, gm)
        return (full,)

    return make_result(np.take(a.data, idx, axis=axis), (a,), backward, "take")


def gather_columns(cols: Tensor, index) -> Tensor:
    """``out[b, :, i] = cols[b, :, index[b, i]]`` for a (b, p, L) tensor."""
    idx = np.asarray(index, dtype=np.intp)
    b, p, n = cols.shape
    if idx.shape != (b, n):
        raise ValueError(f"gather_columns: index shape {idx.shape} does not match (batch, L) = {(b, n)}")
    if idx.min() < 0 or idx.max() >= n:
        raise IndexError("gather_columns: index out of range")
    out = np.stack([cols.data[i][:, idx[i]] for i in range(b)])

    # sort once so the backward scatter is a segmented sum (deterministic order)
    plans = []
    for i in range(b):
        order = np.argsort(idx[i], kind="stable")
        targets, starts = np.unique(idx[i][order], return_index=True)
        plans.append((order, targets, starts))

    def backward(g):
        full = np.zeros(cols.shape, dtype=g.dtype)
        for i, (order, targets, starts) in enumerate(plans):
            full[i][:, targets] = np.add.reduceat(g[i][:, order], starts, axis=1)
        return (full,)

    return make_result(out, (cols,), backward, "gather_columns")


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument never overflows
    e = np.exp(-np.abs(x))
    r = 1 / (1 + e)
    return np.where(x >= 0, r, e * r)


def pointwise(x: Tensor, kind: str) -> Tensor:
    d = x.data
    if kind == "relu":
        out = np.maximum(d, 0)
        return make_result(out, (x,), lambda g: (fault_sign("relu") * g * (d > 0),), "relu")
    if kind == "sigmoid":
        out = _sigmoid(d)
        return make_result(out, (x,), lambda g: (fault_sign("sigmoid") * g * out * (1 - out),), "sigmoid")
    if kind == "silu":
        s = _sigmoid(d)
        out = d * s
        return make_result(out, (x,), lambda g: (fault_sign("silu") * g * (s + d * s * (1 - s)),), "silu")
    if kind == "softplus":
        # log(1 + e^x) = max(x, 0) + log1p(e^-|x|); much faster than logaddexp
        out = np.maximum(d, 0) + np.log1p(np.exp(-np.abs(d)))
        return make_result(out, (x,), lambda g: (fault_sign("softplus") * g * _sigmoid(d),), "softplus")
    if kind == "exp":
        out = np.exp(d)
        return make_result(out, (x,), lambda g: (fault_sign("exp") * g * out,), "exp")
    raise ValueError(f"unknown pointwise kind '{kind}'")


def relu(x):
    return pointwise(x, "relu")


def sigmoid(x):
    return pointwise(x, "sigmoid")


def silu(x):
    return pointwise(x, "silu")


def softplus(x):
    return pointwise(x, "softplus")


def exp(x):
    return pointwise(x, "exp")


def abs(x: Tensor) -> Tensor:  # noqa: A001
    d = x.data
    # subgradient 0 at the kink
    return make_result(np.abs(d), (x,), lambda g: (g * np.sign(d),), "abs")


# ---------------------------------------------------------------------------
# dense layers
# ---------------------------------------------------------------------------

def linear(x: Tensor, W: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ W + b`` over the last axis of ``x``."""
    if W.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise ValueError(f"linear: input {x.shape} incompatible with weight {W.shape}")
    if b is not None and b.shape != (W.shape[1],):
        raise ValueError(f"linear: bias {b.shape} does not match weight {W.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, W.shape[0])
    out = x2 @ W.data
    if b is not None:
        out += b.data
    out = out.reshape(lead + (W.shape[1],))
    Wd = W.data
    sign = fault_sign("linear")

    def backward(g):
        g2 = g.reshape(-1, Wd.shape[1])
        gx = (g2 @ Wd.T).reshape(x.shape) * sign
        gW = x2.T @ g2
        if b is None:
            return gx, gW
        return gx, gW, g2.sum(axis=0)

    inputs = (x, W) if b is None else (x, W, b)
    return make_result(out, inputs, backward, "linear")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise ValueError("layer_norm: normalized axis must be non-empty")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} do not match {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data
    gd = gamma.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        gh = g * gd
        dx = rstd * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return fault_sign("layer_norm") * dx, dgamma, dbeta

    return make_result(out, (x, gamma, beta), backward, "layer_norm")


# ---------------------------------------------------------------------------
# convolution and friends
# ---------------------------------------------------------------------------

def _out_size(n: int, k: int, pad: int, stride: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, pad: int, stride: int) -> np.ndarray:
    """(b, c, H, W) -> (b, c*kh*kw, L) with channel-major patch layout."""
    b, c, H, W = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    oh, ow = win.shape[2], win.shape[3]
    # (b, c, oh, ow, kh, kw) -> (b, c, kh, kw, oh, ow)
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(b, c * kh * kw, oh * ow)


def _col2im(cols: np.ndarray, shape, kh: int, kw: int, pad: int, stride: int, acc_dtype=None) -> np.ndarray:
    """Adjoint of ``_im2col``: scatter-add patches back onto the image."""
    b, c, H, W = shape
    oh, ow = _out_size(H, kh, pad, stride), _out_size(W, kw, pad, stride)
    cols = cols.reshape(b, c, kh, kw, oh, ow)
    out = np.zeros((b, c, H + 2 * pad, W + 2 * pad), dtype=acc_dtype or cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols[:, :, i, j]
    return out[:, :, pad:pad + H, pad:pad + W]


def _depthwise(x: np.ndarray, w: np.ndarray, pad: int) -> np.ndarray:
    b, c, H, W = x.shape
    kh, kw = w.shape[2], w.shape[3]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    oh, ow = H + 2 * pad - kh + 1, W + 2 * pad - kw + 1
    out = np.zeros((b, c, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            out += xp[:, :, i:i + oh, j:j + ow] * w[:, 0, i, j][None, :, None, None]
    return out


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0,
           groups: int = 1) -> Tensor:
    """Cross-correlation of a (b, c_in, H, W) map with a (c_out, c_in/groups, kh, kw) kernel."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError(f"conv2d: expected 4-d input and kernel, got {x.shape} and {kernel.shape}")
    b, cin, H, W = x.shape
    cout, cpg, kh, kw = kernel.shape
    if cin % groups or cout % groups or cin // groups != cpg:
        raise ValueError(f"conv2d: {cin} input channels, kernel {kernel.shape} and groups={groups} are inconsistent")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv2d: bias {bias.shape} does not match {cout} output channels")
    oh, ow = _out_size(H, kh, padding, stride), _out_size(W, kw, padding, stride)
    if oh <= 0 or ow <= 0:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than padded input {H}x{W}")
    xd, wd = x.data, kernel.data
    sign = fault_sign("conv2d")

    if groups == cin and cout == cin and stride == 1:
        out = _depthwise(xd, wd, padding)
        if bias is not None:
            out += bias.data[None, :, None, None]

        def backward(g):
            xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
            gw = np.empty_like(wd)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gw[:, 0, i, j] = (xp[:, :, i:i + oh, j:j + ow] * g).sum(axis=(0, 2, 3))
                    gxp[:, :, i:i + oh, j:j + ow] += g * wd[:, 0, i, j][None, :, None, None]
            gx = gxp[:, :, padding:padding + H, padding:padding + W] * sign
            res = (np.ascontiguousarray(gx), gw)
            return res + ((g.sum(axis=(0, 2, 3)),) if bias is not None else ())
    else:
        cols = _im2col(xd, kh, kw, padding, stride)  # (b, cin*kh*kw, L)
        P = cpg * kh * kw
        go = cout // groups
        out = np.empty((b, cout, oh * ow), dtype=xd.dtype)
        for gi in range(groups):
            wg = wd[gi * go:(gi + 1) * go].reshape(go, P)
            out[:, gi * go:(gi + 1) * go] = np.matmul(wg, cols[:, gi * P:(gi + 1) * P])
        if bias is not None:
            out += bias.data[None, :, None]
        out = out.reshape(b, cout, oh, ow)

        def backward(g):
            g3 = g.reshape(b, cout, oh * ow)
            gw = np.empty_like(wd)
            gcols = np.empty_like(cols)
            for gi in range(groups):
                wg = wd[gi * go:(gi + 1) * go].reshape(go, P)
                gg = g3[:, gi * go:(gi + 1) * go]
                cg = cols[:, gi * P:(gi + 1) * P]
                gw[gi * go:(gi + 1) * go] = np.einsum("bol,bpl->op", gg, cg).reshape(go, cpg, kh, kw)
                gcols[:, gi * P:(gi + 1) * P] = np.matmul(wg.T, gg)
            gx = _col2im(gcols, xd.shape, kh, kw, padding, stride) * sign
            res = (np.ascontiguousarray(gx), gw)
            return res + ((g3.sum(axis=(0, 2)),) if bias is not None else ())

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return make_result(out, inputs, backward, "conv2d")


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ValueError(f"global_avg_pool: expected (b, c, h, w), got {x.shape}")
    b, c, h, w = x.shape
    n = h * w
    return make_result(x.data.mean(axis=(2, 3)), (x,),
                       lambda g: (np.broadcast_to((g / n)[:, :, None, None], x.shape).copy(),), "global_avg_pool")


def channel_scale(x: Tensor, w: Tensor) -> Tensor:
    """Multiply each (b, c) plane of ``x`` by the scalar ``w[b, c]``."""
    if x.ndim != 4 or w.shape != x.shape[:2]:
        raise ValueError(f"channel_scale: gate {w.shape} does not match map {x.shape}")
    xd, wd = x.data, w.data
    out = xd * wd[:, :, None, None]
    return make_result(out, (x, w), lambda g: (g * wd[:, :, None, None], (g * xd).sum(axis=(2, 3))), "channel_scale")


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    b, c, h, w = x.shape
    if c % (r * r):
        raise ValueError(f"pixel_shuffle: {c} channels not divisible by r^2 = {r * r}")
    co = c // (r * r)
    out = x.data.reshape(b, co, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(b, co, h * r, w * r)

    def backward(g):
        return (g.reshape(b, co, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(b, c, h, w),)

    return make_result(np.ascontiguousarray(out), (x,), backward, "pixel_shuffle")


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    b, c, H, W = x.shape
    if H % r or W % r:
        raise ValueError(f"pixel_unshuffle: spatial dims {H}x{W} not divisible by {r}")
    h, w = H // r, W // r
    out = x.data.reshape(b, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(b, c * r * r, h, w)

    def backward(g):
        return (g.reshape(b, c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(b, c, H, W),)

    return make_result(np.ascontiguousarray(out), (x,), backward, "pixel_unshuffle")


def _check_patch(k: int, padding: int, stride: int, H: int, W: int) -> None:
    if k < 1 or k % 2 == 0:
        raise ValueError(f"patch size must be odd and positive, got {k}")
    if k > H + 2 * padding or k > W + 2 * padding:
        raise ValueError(f"patch size {k} larger than padded extent {H + 2 * padding}x{W + 2 * padding}")


def unfold(x: Tensor, k: int, padding: int = 0, stride: int = 1) -> Tensor:
    """Sliding k x k patches as columns: (b, c, H, W) -> (b, c*k*k, L)."""
    b, c, H, W = x.shape
    _check_patch(k, padding, stride, H, W)
    cols = _im2col(x.data, k, k, padding, stride)
    shape = x.shape
    return make_result(cols, (x,), lambda g: (_col2im(g, shape, k, k, padding, stride),), "unfold")


def _fold_counts(shape, k, padding, stride, dtype):
    ones = np.ones((1, 1) + tuple(shape[2:]), dtype=dtype)
    return _col2im(_im2col(ones, k, k, padding, stride), ones.shape, k, k, padding, stride)


def fold(cols: Tensor, output_size, channels: int, k: int, padding: int = 0, stride: int = 1,
         normalize: bool = True) -> Tensor:
    """Inverse of ``unfold``; with ``normalize`` overlaps are averaged.

    Overlap sums are accumulated in extended precision so that
    ``fold(unfold(x))`` reproduces ``x`` bit for bit.
    """
    H, W = output_size
    b = cols.shape[0]
    _check_patch(k, padding, stride, H, W)
    L = _out_size(H, k, padding, stride) * _out_size(W, k, padding, stride)
    if cols.shape != (b, channels * k * k, L):
        raise ValueError(f"fold: columns {cols.shape} do not match {channels} channels, k={k}, L={L}")
    shape = (b, channels, H, W)
    if not normalize:
        out = _col2im(cols.data, shape, k, k, padding, stride)
        return make_result(np.ascontiguousarray(out), (cols,),
                           lambda g: (_im2col(g, k, k, padding, stride),), "fold")
    wide = np.longdouble if cols.dtype == np.float64 else np.float64
    counts = _fold_counts(shape, k, padding, stride, wide)
    total = _col2im(cols.data, shape, k, k, padding, stride, acc_dtype=wide)
    out = (total / counts).astype(cols.dtype)
    inv = (1.0 / counts).astype(cols.dtype)
    return make_result(np.ascontiguousarray(out), (cols,),
                       lambda g: (_im2col(g * inv, k, k, padding, stride),), "fold")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def l1_loss(a: Tensor, b) -> Tensor:
    """Mean absolute difference."""
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("l1_loss", a, b)
    diff = a.data - b.data
    n = diff.size
    val = np.asarray(np.abs(diff).mean())

    def backward(g):
        s = np.sign(diff) * (g / n)
        return s, -s

    return make_result(val, (a, b), backward, "l1_loss")


def mse_loss(a: Tensor, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mse_loss", a, b)
    diff = a.data - b.data
    n = diff.size
    return make_result(np.asarray((diff * diff).mean()), (a, b),
                       lambda g: (2 * diff * g / n, -2 * diff * g / n), "mse_loss")


def finite_or_raise(x: Tensor, what: str = "tensor") -> Tensor:
    if not np.all(np.isfinite(x.data)):
        raise FloatingPointError(f"{what} contains non-finite values")
    return x

