"""Differentiable primitives.

Every function takes :class:`Tensor` (or array-like) inputs, computes the
forward value with numpy and records a backward rule when a tape is active.
Layouts: network activations are ``(B, C, *spatial)``; vector fields are
``(B, *spatial, d)`` (channel last), matching :mod:`lddmm_gan.grid`.
"""
from __future__ import annotations

from itertools import product

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .. import grid as G
from ..errors import ShapeError
from ..spectral import filter_channels
from .tensor import Tensor, as_tensor, record


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for a, n in enumerate(shape):
        if n == 1 and g.shape[a] != 1:
            g = g.sum(axis=a, keepdims=True)
    return g


def _binary_shape(a: Tensor, b: Tensor, what: str):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} do not broadcast") from None


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape(a, b, "add")
    return record(a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape(a, b, "sub")
    return record(a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    """Elementwise product with broadcasting."""
    if not isinstance(b, Tensor) and np.isscalar(b):
        return scalar_mul(a, b)
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape(a, b, "mul")
    return record(a.data * b.data, (a, b),
                  lambda g: (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                             _unbroadcast(g * a.data, b.shape) if b.requires_grad else None))


def scalar_mul(a, c: float) -> Tensor:
    a = as_tensor(a)
    return record(a.data * c, (a,), lambda g: (g * c,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return record(x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = np.empty_like(x.data)
    pos = x.data >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    y[~pos] = ex / (1.0 + ex)
    return record(y, (x,), lambda g: (g * y * (1.0 - y),))


def log(x) -> Tensor:
    x = as_tensor(x)
    return record(np.log(x.data), (x,), lambda g: (g / x.data,))


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp values; the gradient is zero where clamping was active."""
    x = as_tensor(x)
    mask = (x.data >= lo) & (x.data <= hi)
    return record(np.clip(x.data, lo, hi), (x,), lambda g: (g * mask,))


# --------------------------------------------------------------------------
# reductions and shape manipulation
# --------------------------------------------------------------------------

def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)), shape)
    if not keepdims:
        axes = (axis,) if np.isscalar(axis) else axis
        axes = sorted(a % len(shape) for a in axes)
        for a in axes:
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def sum(x, axis=None, keepdims=False) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)
    return record(np.asarray(out), (x,),
                  lambda g: (_expand_reduced(g, x.shape, axis, keepdims).copy(),))


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    out = np.mean(x.data, axis=axis, keepdims=keepdims)
    n = x.data.size // max(np.asarray(out).size, 1)
    return record(np.asarray(out), (x,),
                  lambda g: (_expand_reduced(g, x.shape, axis, keepdims) / n,))


def sum_of_squares(x, axis=None) -> Tensor:
    x = as_tensor(x)
    out = np.sum(x.data * x.data, axis=axis)
    return record(np.asarray(out), (x,),
                  lambda g: (2.0 * x.data * _expand_reduced(g, x.shape, axis, False),))


def astype(x, dtype) -> Tensor:
    """Precision change; the gradient is cast back to the input dtype."""
    x = as_tensor(x)
    return record(x.data.astype(dtype), (x,), lambda g: (g.astype(x.dtype),))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return record(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    inv = np.argsort(axes)
    return record(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                  lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def getitem(x, index) -> Tensor:
    x = as_tensor(x)

    def bwd(g):
        out = np.zeros_like(x.data)
        np.add.at(out, index, g) if _has_advanced(index) else out.__setitem__(index, g)
        return (out,)
    return record(np.array(x.data[index]), (x,), bwd)


def _has_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return record(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis if axis >= 0 else tensors[0].ndim + 1 + axis
    expanded = [reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]) for t in tensors]
    return concat(expanded, axis=ax)


# --------------------------------------------------------------------------
# dense / conv
# --------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return record(a.data @ b.data, (a, b),
                  lambda g: (g @ b.data.T if a.requires_grad else None,
                             a.data.T @ g if b.requires_grad else None))


def dense(x, W, b=None) -> Tensor:
    """``x @ W.T + b`` with ``x`` of shape ``(B, F)`` and ``W`` of shape ``(out, F)``."""
    x, W = as_tensor(x), as_tensor(W)
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[1]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weight {W.shape}")
    inputs = (x, W) if b is None else (x, W, as_tensor(b))
    out = x.data @ W.data.T
    if b is not None:
        out = out + inputs[2].data

    def bwd(g):
        grads = [g @ W.data if x.requires_grad else None, g.T @ x.data]
        if b is not None:
            grads.append(g.sum(axis=0))
        return grads
    return record(out, inputs, bwd)


def _im2col(xp: np.ndarray, ksize, stride) -> tuple[np.ndarray, tuple]:
    """``(B, C, *S)`` -> ``(B*prod(O), C*prod(K))`` with column order ``(C, *K)``."""
    d = len(ksize)
    spatial_axes = tuple(range(2, 2 + d))
    win = sliding_window_view(xp, ksize, axis=spatial_axes)
    win = win[(slice(None), slice(None)) + (slice(None, None, stride),) * d]
    B, C = xp.shape[:2]
    O = win.shape[2:2 + d]
    order = (0,) + tuple(range(2, 2 + d)) + (1,) + tuple(range(2 + d, 2 + 2 * d))
    cols = win.transpose(order).reshape(B * int(np.prod(O)), C * int(np.prod(ksize)))
    return cols, O


def _col2im(cols: np.ndarray, B: int, C: int, O, ksize, stride, out_spatial) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add ``(B*prod(O), C*prod(K))`` back to ``(B, C, *S)``."""
    d = len(ksize)
    cols = cols.reshape((B, *O, C, *ksize))
    # kernel offsets first, then (B, C, *O): each offset becomes one contiguous block
    order = tuple(range(2 + d, 2 + 2 * d)) + (0, 1 + d) + tuple(range(1, 1 + d))
    blocks = np.ascontiguousarray(cols.transpose(order))
    if all(k == stride for k in ksize) and tuple(out_spatial) == tuple(o * stride for o in O):
        # non-overlapping windows: the scatter is a pure interleave
        blocks = blocks.reshape(ksize + (B, C) + tuple(O))
        order = (d, d + 1) + tuple(a for i in range(d) for a in (d + 2 + i, i))
        return np.ascontiguousarray(blocks.transpose(order)).reshape((B, C, *out_spatial))
    out = np.zeros((B, C, *out_spatial), dtype=cols.dtype)
    for k in product(*(range(n) for n in ksize)):
        sl = tuple(slice(k[a], k[a] + stride * (O[a] - 1) + 1, stride) for a in range(d))
        out[(slice(None), slice(None)) + sl] += blocks[k]
    return out


def conv(x, W, b=None, stride: int = 1, padding: str | int = "same") -> Tensor:
    """N-d cross-correlation, ``x: (B, Cin, *S)``, ``W: (Cout, Cin, *K)``.

    ``padding="same"`` zero-pads ``(K - 1) // 2`` on each side.
    """
    x, W = as_tensor(x), as_tensor(W)
    d = x.ndim - 2
    if W.ndim != d + 2 or W.shape[1] != x.shape[1]:
        raise ShapeError(f"conv: input {x.shape} incompatible with kernel {W.shape}")
    ksize = W.shape[2:]
    pad = [(k - 1) // 2 for k in ksize] if padding == "same" else [int(padding)] * d
    xp = np.pad(x.data, [(0, 0), (0, 0)] + [(p, p) for p in pad]) if any(pad) else x.data
    if any(s < k for s, k in zip(xp.shape[2:], ksize)):
        raise ShapeError(f"conv: input {x.shape} smaller than kernel {ksize}")
    B, Cin, Cout = x.shape[0], x.shape[1], W.shape[0]
    inputs = [x, W]
    if stride == 1:
        out, bwd = _conv_stride1(x, W, xp, pad)
    else:
        out, bwd = _conv_im2col(x, W, xp, pad, stride)
    if b is not None:
        bt = as_tensor(b)
        out += bt.data.reshape((1, Cout) + (1,) * d)
        inputs.append(bt)

    def full_bwd(g):
        grads = list(bwd(g))
        if b is not None:
            grads.append(g.sum(axis=(0,) + tuple(range(2, 2 + d))))
        return grads
    return record(out, inputs, full_bwd)


def _shifts(ksize, O):
    for k in product(*(range(n) for n in ksize)):
        yield k, tuple(slice(k[a], k[a] + O[a]) for a in range(len(ksize)))


def _conv_stride1(x, W, xp, pad):
    """One matmul against every kernel tap, then shifted sums; avoids the im2col copy."""
    B, Cin, Cout, d = x.shape[0], x.shape[1], W.shape[0], x.ndim - 2
    ksize, Sp = W.shape[2:], xp.shape[2:]
    O = tuple(s - k + 1 for s, k in zip(Sp, ksize))
    taps = tuple(range(2, 2 + d))
    Wa = W.data.transpose(taps + (0, 1)).reshape(-1, Cin)
    Y = np.matmul(Wa, xp.reshape(B, Cin, -1)).reshape((B, *ksize, Cout, *Sp))
    out = np.zeros((B, Cout, *O), dtype=Y.dtype)
    for k, sl in _shifts(ksize, O):
        out += Y[(slice(None),) + k + (slice(None),) + sl]

    def bwd(g):
        gx = None
        if x.requires_grad:
            Wt = W.data.transpose(taps + (1, 0)).reshape(-1, Cout)
            Z = np.matmul(Wt, g.reshape(B, Cout, -1)).reshape((B, *ksize, Cin, *O))
            gxp = np.zeros((B, Cin, *Sp), dtype=Z.dtype)
            for k, sl in _shifts(ksize, O):
                gxp[(slice(None), slice(None)) + sl] += Z[(slice(None),) + k]
            crop = tuple(slice(p, p + n) for p, n in zip(pad, x.shape[2:]))
            gx = gxp[(slice(None), slice(None)) + crop]
        cols, _ = _im2col(xp, ksize, 1)
        g2 = np.moveaxis(g, 1, -1).reshape(-1, Cout)
        return gx, (g2.T @ cols).reshape(W.shape)
    return out, bwd


def _conv_im2col(x, W, xp, pad, stride):
    B, Cin, Cout = x.shape[0], x.shape[1], W.shape[0]
    ksize = W.shape[2:]
    cols, O = _im2col(xp, ksize, stride)
    Wm = W.data.reshape(Cout, -1)
    out = (cols @ Wm.T).reshape((B, *O, Cout))
    out = np.ascontiguousarray(np.moveaxis(out, -1, 1))

    def bwd(g):
        g2 = np.moveaxis(g, 1, -1).reshape(-1, Cout)
        gx = None
        if x.requires_grad:
            gp = _col2im(g2 @ Wm, B, Cin, O, ksize, stride, xp.shape[2:])
            crop = tuple(slice(p, p + n) for p, n in zip(pad, x.shape[2:]))
            gx = gp[(slice(None), slice(None)) + crop]
        return gx, (g2.T @ cols).reshape(W.shape)
    return out, bwd


def transposed_conv(x, W, b=None, stride: int = 2) -> Tensor:
    """Transposed convolution without padding.

    ``x: (B, Cin, *N)``, ``W: (Cin, Cout, *K)``; output extent ``(N - 1) * stride + K``.
    """
    x, W = as_tensor(x), as_tensor(W)
    d = x.ndim - 2
    if W.ndim != d + 2 or W.shape[0] != x.shape[1]:
        raise ShapeError(f"transposed_conv: input {x.shape} incompatible with kernel {W.shape}")
    B, Cin = x.shape[:2]
    Cout, ksize = W.shape[1], W.shape[2:]
    N = x.shape[2:]
    out_spatial = tuple((n - 1) * stride + k for n, k in zip(N, ksize))
    x2 = np.moveaxis(x.data, 1, -1).reshape(-1, Cin)
    Wm = W.data.reshape(Cin, -1)
    out = _col2im(x2 @ Wm, B, Cout, N, ksize, stride, out_spatial)
    inputs = [x, W]
    if b is not None:
        bt = as_tensor(b)
        out += bt.data.reshape((1, Cout) + (1,) * d)
        inputs.append(bt)

    def bwd(g):
        gcols, _ = _im2col(g, ksize, stride)
        gx = None
        if x.requires_grad:
            gx = np.ascontiguousarray(np.moveaxis((gcols @ Wm.T).reshape((B, *N, Cin)), -1, 1))
        grads = [gx, (x2.T @ gcols).reshape(W.shape)]
        if b is not None:
            grads.append(g.sum(axis=(0,) + tuple(range(2, 2 + d))))
        return grads
    return record(out, inputs, bwd)


def max_pool(x, window: int = 2) -> Tensor:
    """Non-overlapping max pooling over all spatial axes of ``(B, C, *S)``."""
    x = as_tensor(x)
    d = x.ndim - 2
    S = x.shape[2:]
    if any(n % window for n in S):
        raise ShapeError(f"max_pool: spatial extents {S} not divisible by {window}")
    split = x.shape[:2] + tuple(v for n in S for v in (n // window, window))
    order = (0, 1) + tuple(2 + 2 * a for a in range(d)) + tuple(3 + 2 * a for a in range(d))
    blocks = x.data.reshape(split).transpose(order)
    pooled_shape = blocks.shape[:2 + d]
    flat = blocks.reshape(pooled_shape + (-1,))
    arg = flat.argmax(axis=-1)[..., None]
    out = np.take_along_axis(flat, arg, axis=-1)[..., 0]
    inv = np.argsort(order)

    def bwd(g):
        gf = np.zeros_like(flat)
        np.put_along_axis(gf, arg, g[..., None], axis=-1)
        return (gf.reshape(blocks.shape).transpose(inv).reshape(x.shape),)
    return record(out, (x,), bwd)


# --------------------------------------------------------------------------
# fields
# --------------------------------------------------------------------------

def grid_sample(values, points) -> Tensor:
    """Multilinear sampling, differentiable in both arguments.

    ``values: (B, *S, C)``; ``points: (B, *M, d)`` unit-domain coordinates
    (clamped to the boundary). Returns ``(B, *M, C)``.
    """
    values, points = as_tensor(values), as_tensor(points)
    d = points.shape[-1]
    B = values.shape[0]
    S = values.shape[1:-1]
    if len(S) != d or points.shape[0] != B:
        raise ShapeError(f"grid_sample: values {values.shape} vs points {points.shape}")
    M = points.shape[1:-1]
    C = values.shape[-1]
    plan = G.plan_sampling(points.data.reshape(B, -1, d), S)
    out = G.sample_forward(values.data, plan).reshape((B, *M, C))

    def bwd(g):
        g2 = g.reshape(-1, C)
        gv = G.sample_backward_values(g2, plan, values.dtype) if values.requires_grad else None
        gp = None
        if points.requires_grad:
            gp = G.sample_backward_points(values.data, g2, plan).astype(points.dtype).reshape(points.shape)
        return gv, gp
    return record(out, (values, points), bwd)


def spectral_filter(x, half_multipliers: np.ndarray, dims: int) -> Tensor:
    """Real even Fourier multiplier on the spatial axes of a channel-last field."""
    x = as_tensor(x)
    return record(filter_channels(x.data, half_multipliers, dims), (x,),
                  lambda g: (filter_channels(g, half_multipliers, dims),))


def spatial_diff(x, axis: int, h: float) -> Tensor:
    """Finite-difference derivative along ``axis`` (central inside, one-sided at the ends)."""
    x = as_tensor(x)
    return record(G.diff_axis(x.data, axis, h), (x,),
                  lambda g: (G.diff_axis_adjoint(g, axis, h),))


def field_jacobian(v, spacing) -> Tensor:
    """``J[..., i, j] = d v_i / d x_j`` for a channel-last field ``(..., *S, C)``."""
    v = as_tensor(v)
    d = len(spacing)
    first = v.ndim - 1 - d
    out = np.stack([G.diff_axis(v.data, first + a, h) for a, h in enumerate(spacing)], axis=-1)

    def bwd(g):
        return (_jacobian_adjoint(g, first, spacing),)
    return record(out, (v,), bwd)


def _jacobian_adjoint(g, first, spacing):
    acc = None
    for a, h in enumerate(spacing):
        term = G.diff_axis_adjoint(g[..., a], first + a, h)
        acc = term if acc is None else acc + term
    return acc
