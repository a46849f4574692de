"""Integration layers: warping, composition, scaling-and-squaring, transport and
EPDiff shooting, all unrolled through the tape.

Fields are batched and channel last: ``(B, *S, d)``; images are ``(B, *S)``.
"""
from __future__ import annotations

import numpy as np

from .. import grid as G
from ..errors import DivergenceError, InvalidParameterError
from ..spectral import CauchyNavierOperator
from . import ops
from .tensor import Tensor, as_tensor

_IDENTITY_CACHE: dict = {}


def identity(extents, dtype) -> np.ndarray:
    key = (tuple(extents), np.dtype(dtype).str)
    if key not in _IDENTITY_CACHE:
        _IDENTITY_CACHE[key] = G.identity_coords(G.GridSpec(extents)).astype(dtype)[None]
    return _IDENTITY_CACHE[key]


def warp_image(image, phi_inv) -> Tensor:
    """``I(x + u(x))`` for ``image: (B, *S)`` and ``phi_inv: (B, *S, d)``."""
    image, phi_inv = as_tensor(image), as_tensor(phi_inv)
    pts = ops.add(phi_inv, identity(phi_inv.shape[1:-1], phi_inv.dtype))
    vals = ops.reshape(image, image.shape + (1,))
    out = ops.grid_sample(vals, pts)
    return ops.reshape(out, image.shape)


def warp_field(field, phi_inv) -> Tensor:
    field, phi_inv = as_tensor(field), as_tensor(phi_inv)
    pts = ops.add(phi_inv, identity(phi_inv.shape[1:-1], phi_inv.dtype))
    return ops.grid_sample(field, pts)


def compose(outer, inner) -> Tensor:
    return ops.add(inner, warp_field(outer, inner))


def exp_svf_layer(v, squarings: int) -> Tensor:
    if squarings < 1:
        raise InvalidParameterError(f"squarings must be >= 1, got {squarings}")
    u = ops.scalar_mul(v, 1.0 / 2.0**squarings)
    for _ in range(squarings):
        u = compose(u, u)
    return u


def euler_transport_layer(flow) -> Tensor:
    """Forward Euler for the inverse-map transport equation; ``flow`` is a list of T+1 fields."""
    T = len(flow) - 1
    if T < 1:
        raise InvalidParameterError("a flow needs at least two samples")
    u = None
    for v in flow[:-1]:
        step = v if u is None else warp_field(v, u)
        u = ops.scalar_mul(step, -1.0 / T) if u is None else ops.sub(u, ops.scalar_mul(step, 1.0 / T))
    return u


def epdiff_rhs(v, op: CauchyNavierOperator) -> Tensor:
    d = op.grid.dims
    half = op.half_multipliers
    m = ops.spectral_filter(v, half, d)
    Dv = ops.field_jacobian(v, op.grid.spacing)
    Dm = ops.field_jacobian(m, op.grid.spacing)
    sh = v.shape
    # (Dv)^T m: sum_j dv_j/dx_i m_j
    t1 = ops.sum(ops.mul(Dv, ops.reshape(m, sh + (1,))), axis=-2)
    # D(m) v: sum_j dm_i/dx_j v_j
    t2 = ops.sum(ops.mul(Dm, ops.reshape(v, sh[:-1] + (1, d))), axis=-1)
    div = ops.sum(ops.mul(Dv, np.eye(d, dtype=v.dtype)), axis=(-2, -1))
    t3 = ops.mul(m, ops.reshape(div, sh[:-1] + (1,)))
    return ops.spectral_filter(ops.add(ops.add(t1, t2), t3), 1.0 / half, d)


def epdiff_shoot_layer(v0, op: CauchyNavierOperator, T: int) -> list:
    """Unrolled Euler integration of EPDiff; returns ``[v_0, ..., v_T]``."""
    if T < 1:
        raise InvalidParameterError(f"T must be >= 1, got {T}")
    v = as_tensor(v0)
    flow = [v]
    for j in range(T):
        v = ops.sub(v, ops.scalar_mul(epdiff_rhs(v, op), 1.0 / T))
        if not np.all(np.isfinite(v.data)):
            raise DivergenceError(f"EPDiff shooting diverged at step {j + 1}", step=j + 1)
        flow.append(v)
    return flow
