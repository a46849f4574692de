"""Grids, fields and the interpolation / differential kernels everything else uses.

Conventions
-----------
* The image domain is the unit cube ``[0, 1)^d`` sampled at ``N_i`` nodes per
  axis, node ``i`` sitting at ``i * h`` with ``h = 1 / N``.
* Scalar images are arrays of shape ``(N_1, ..., N_d)``.
* Vector / displacement fields are arrays of shape ``(N_1, ..., N_d, d)``
  (channel last, row-major). A displacement ``u`` represents ``x -> x + u(x)``.
* Most kernels also accept a leading batch axis; pass ``batched=True``.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

from .errors import InvalidInputError, ShapeError


@dataclass(frozen=True)
class GridSpec:
    extents: tuple[int, ...]

    def __post_init__(self):
        ext = tuple(int(n) for n in self.extents)
        object.__setattr__(self, "extents", ext)
        if len(ext) not in (2, 3):
            raise ShapeError(f"only 2D and 3D grids are supported, got {len(ext)}D")
        if min(ext) < 4:
            raise ShapeError(f"every axis needs at least 4 samples, got {ext}")

    @classmethod
    def from_shape(cls, shape) -> "GridSpec":
        return cls(tuple(shape))

    @property
    def dims(self) -> int:
        return len(self.extents)

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple(1.0 / n for n in self.extents)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def size(self) -> int:
        return int(np.prod(self.extents))


def grid_of(field: np.ndarray, vector: bool = False, batched: bool = False) -> GridSpec:
    """Recover the grid of an image (``vector=False``) or a d-channel field."""
    shape = field.shape[1:] if batched else field.shape
    if vector:
        grid = GridSpec(shape[:-1])
        if shape[-1] != grid.dims:
            raise ShapeError(f"field has {shape[-1]} channels on a {grid.dims}D grid")
        return grid
    return GridSpec(shape)


def identity_coords(grid: GridSpec, dtype=np.float64) -> np.ndarray:
    """Unit-domain node positions, shape ``(*extents, d)``."""
    axes = [np.arange(n, dtype=dtype) / n for n in grid.extents]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


# --------------------------------------------------------------------------
# multilinear sampling kernel (shared with the autodiff grid_sample primitive)
# --------------------------------------------------------------------------

@dataclass
class SamplePlan:
    """Corner indices and weights for sampling a ``(B, *extents, C)`` array."""

    flat_index: list[np.ndarray]   # per corner, (B*M,) indices into (B*P, C)
    weights: list[np.ndarray]      # per corner, (B*M,)
    frac: np.ndarray               # (B*M, d) fractional offsets in the cell
    inside: np.ndarray             # (B*M, d) False where the coordinate was clamped
    extents: tuple[int, ...]
    batch: int
    points: int


def plan_sampling(points: np.ndarray, extents) -> SamplePlan:
    """Prepare multilinear sampling at unit-domain ``points`` of shape ``(B, M, d)``.

    Coordinates outside ``[0, (N-1)/N]`` are clamped to the boundary node.
    """
    B, M, d = points.shape
    ext = np.asarray(extents)
    if d != len(ext):
        raise ShapeError(f"{d}-vectors cannot address a {len(ext)}D grid")
    q = points.reshape(B * M, d) * ext
    upper = ext - 1
    inside = (q >= 0) & (q <= upper)
    q = np.clip(q, 0, upper)
    i0 = np.clip(np.floor(q), 0, upper - 1).astype(np.intp)
    frac = q - i0
    strides = np.r_[np.cumprod(ext[::-1])[::-1][1:], 1]
    base = i0 @ strides + (np.arange(B, dtype=np.intp) * int(np.prod(ext))).repeat(M)
    flat, weights = [], []
    for corner in product((0, 1), repeat=d):
        c = np.asarray(corner)
        flat.append(base + int(c @ strides))
        w = np.ones(B * M, dtype=frac.dtype)
        for a in range(d):
            w = w * (frac[:, a] if corner[a] else 1.0 - frac[:, a])
        weights.append(w)
    return SamplePlan(flat, weights, frac, inside, tuple(int(n) for n in ext), B, M)


def sample_forward(values: np.ndarray, plan: SamplePlan) -> np.ndarray:
    """``values`` is ``(B, *extents, C)``; returns ``(B*M, C)``."""
    C = values.shape[-1]
    flat = values.reshape(-1, C)
    out = np.zeros((plan.batch * plan.points, C), dtype=values.dtype)
    for idx, w in zip(plan.flat_index, plan.weights):
        out += flat[idx] * w[:, None].astype(values.dtype, copy=False)
    return out


def sample_backward_values(grad: np.ndarray, plan: SamplePlan, dtype) -> np.ndarray:
    """Adjoint of :func:`sample_forward` with respect to the sampled array."""
    C = grad.shape[-1]
    P = plan.batch * int(np.prod(plan.extents))
    out = np.zeros((P, C), dtype=np.float64)
    for idx, w in zip(plan.flat_index, plan.weights):
        for c in range(C):
            out[:, c] += np.bincount(idx, weights=w * grad[:, c], minlength=P)
    return out.astype(dtype, copy=False).reshape((plan.batch, *plan.extents, C))


def sample_backward_points(values: np.ndarray, grad: np.ndarray, plan: SamplePlan) -> np.ndarray:
    """Gradient with respect to the unit-domain sample points, ``(B*M, d)``."""
    C = values.shape[-1]
    flat = values.reshape(-1, C)
    d = len(plan.extents)
    out = np.zeros((plan.batch * plan.points, d), dtype=values.dtype)
    corners = list(product((0, 1), repeat=d))
    for a in range(d):
        acc = np.zeros((plan.batch * plan.points, C), dtype=values.dtype)
        for corner, idx in zip(corners, plan.flat_index):
            w = np.ones(len(idx), dtype=plan.frac.dtype)
            for b in range(d):
                if b == a:
                    continue
                w = w * (plan.frac[:, b] if corner[b] else 1.0 - plan.frac[:, b])
            sign = 1.0 if corner[a] else -1.0
            acc += flat[idx] * (sign * w)[:, None].astype(values.dtype, copy=False)
        scale = plan.extents[a] * plan.inside[:, a]
        out[:, a] = (acc * grad).sum(axis=1) * scale
    return out


# --------------------------------------------------------------------------
# public interpolation / warping API
# --------------------------------------------------------------------------

def interpolate(field: np.ndarray, points, vector: bool = False) -> np.ndarray:
    """Multilinear interpolation of an image or vector field at unit-domain points.

    ``points`` has shape ``(M, d)``. Returns ``(M,)`` for images and ``(M, C)``
    for vector fields. Points outside the domain are clamped to its boundary.
    """
    points = np.asarray(points, dtype=np.float64)
    if not np.all(np.isfinite(points)):
        raise InvalidInputError("non-finite sample coordinates")
    values = field if vector else field[..., None]
    extents = values.shape[:-1]
    if points.ndim != 2 or points.shape[1] != len(extents):
        raise ShapeError(f"points must be (M, {len(extents)}), got {points.shape}")
    plan = plan_sampling(points[None], extents)
    out = sample_forward(values[None], plan)
    return out if vector else out[:, 0]


def _check_same_grid(a_shape, b_shape, what):
    if tuple(a_shape) != tuple(b_shape):
        raise ShapeError(f"{what}: grid {tuple(a_shape)} does not match {tuple(b_shape)}")


def warp_image(image: np.ndarray, phi_inv: np.ndarray) -> np.ndarray:
    """``image(x + u(x))``: pull an image back through a displacement field."""
    _check_same_grid(image.shape, phi_inv.shape[:-1], "warp_image")
    grid = grid_of(phi_inv, vector=True)
    pts = (identity_coords(grid) + phi_inv).reshape(-1, grid.dims)
    return interpolate(image, pts).reshape(image.shape).astype(image.dtype, copy=False)


def warp_field(field: np.ndarray, phi_inv: np.ndarray) -> np.ndarray:
    """Sample every channel of ``field`` at ``x + u(x)``."""
    _check_same_grid(field.shape[:-1], phi_inv.shape[:-1], "warp_field")
    grid = grid_of(phi_inv, vector=True)
    pts = (identity_coords(grid) + phi_inv).reshape(-1, grid.dims)
    return interpolate(field, pts, vector=True).reshape(field.shape).astype(field.dtype, copy=False)


def compose(outer: np.ndarray, inner: np.ndarray) -> np.ndarray:
    """Displacement of ``outer o inner``: ``u_in(x) + u_out(x + u_in(x))``."""
    _check_same_grid(outer.shape, inner.shape, "compose")
    return inner + warp_field(outer, inner)


# --------------------------------------------------------------------------
# finite differences
# --------------------------------------------------------------------------

def diff_axis(f: np.ndarray, axis: int, h: float) -> np.ndarray:
    """Central differences inside, first-order one-sided at both ends."""
    f = np.moveaxis(f, axis, 0)
    out = np.empty_like(f)
    out[1:-1] = (f[2:] - f[:-2]) / (2 * h)
    out[0] = (f[1] - f[0]) / h
    out[-1] = (f[-1] - f[-2]) / h
    return np.moveaxis(out, 0, axis)


def diff_axis_adjoint(g: np.ndarray, axis: int, h: float) -> np.ndarray:
    """Transpose of :func:`diff_axis` as a linear map."""
    g = np.moveaxis(g, axis, 0)
    out = np.zeros_like(g)
    out[2:] += g[1:-1] / (2 * h)
    out[:-2] -= g[1:-1] / (2 * h)
    out[1] += g[0] / h
    out[0] -= g[0] / h
    out[-1] += g[-1] / h
    out[-2] -= g[-1] / h
    return np.moveaxis(out, 0, axis)


def gradient(f: np.ndarray) -> np.ndarray:
    """Spatial gradient of a scalar image, shape ``(*extents, d)``."""
    grid = grid_of(f)
    return np.stack([diff_axis(f, a, h) for a, h in enumerate(grid.spacing)], axis=-1)


def jacobian(v: np.ndarray) -> np.ndarray:
    """``J[..., i, j] = d v_i / d x_j`` for a vector field ``v``."""
    grid = grid_of(v, vector=True)
    return np.stack([diff_axis(v, a, h) for a, h in enumerate(grid.spacing)], axis=-1)


def divergence(v: np.ndarray) -> np.ndarray:
    grid = grid_of(v, vector=True)
    return sum(diff_axis(v[..., a], a, h) for a, h in enumerate(grid.spacing))


def jacobian_determinant(phi_inv: np.ndarray) -> np.ndarray:
    """``det(Id + Du)`` per node."""
    grid = grid_of(phi_inv, vector=True)
    J = jacobian(phi_inv) + np.eye(grid.dims)
    return np.linalg.det(J)


def interior(a: np.ndarray, dims: int, ring: int = 1) -> np.ndarray:
    """Drop a ``ring``-node boundary band from the first ``dims`` axes."""
    return a[(slice(ring, -ring),) * dims]
