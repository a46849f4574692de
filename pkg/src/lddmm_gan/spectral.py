"""The Cauchy-Navier metric operator ``L = (Id - alpha*Lap)^s`` and its inverse ``K``.

Both are diagonal in the periodic discrete Fourier basis, so they are applied
as per-frequency multipliers on every channel of a field.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidParameterError, ShapeError
from .grid import GridSpec


@dataclass(frozen=True)
class CauchyNavierOperator:
    alpha: float
    s: float
    grid: GridSpec
    multipliers: np.ndarray = field(repr=False)

    @property
    def half_multipliers(self) -> np.ndarray:
        """Multipliers restricted to the ``rfftn`` half spectrum."""
        n_last = self.grid.extents[-1] // 2 + 1
        return self.multipliers[..., :n_last]


def laplacian_symbol(grid: GridSpec) -> np.ndarray:
    """Eigenvalues of minus the periodic 3-point Laplacian, ``sum_i (2 - 2cos(2pi k_i/N_i)) / h_i^2``."""
    symbol = np.zeros(grid.extents)
    for a, (n, h) in enumerate(zip(grid.extents, grid.spacing)):
        k = np.arange(n)
        axis_symbol = (2.0 - 2.0 * np.cos(2.0 * np.pi * k / n)) / h**2
        shape = [1] * grid.dims
        shape[a] = n
        symbol = symbol + axis_symbol.reshape(shape)
    return symbol


def build(alpha: float, s: float, grid: GridSpec) -> CauchyNavierOperator:
    if not alpha > 0:
        raise InvalidParameterError(f"alpha must be positive, got {alpha}")
    mult = (1.0 + alpha * laplacian_symbol(grid)) ** s
    mult.setflags(write=False)
    return CauchyNavierOperator(float(alpha), float(s), grid, mult)


def filter_channels(x: np.ndarray, half_multipliers: np.ndarray, dims: int) -> np.ndarray:
    """Apply a real, even Fourier multiplier over the ``dims`` spatial axes that
    precede the trailing channel axis of ``x`` (leading batch axes allowed)."""
    axes = tuple(range(x.ndim - 1 - dims, x.ndim - 1))
    spatial = x.shape[x.ndim - 1 - dims: x.ndim - 1]
    X = np.fft.rfftn(x, axes=axes)
    X *= half_multipliers[..., None]
    return np.fft.irfftn(X, s=spatial, axes=axes).astype(x.dtype, copy=False)


def _check(op: CauchyNavierOperator, v: np.ndarray):
    d = op.grid.dims
    if v.ndim < d + 1 or tuple(v.shape[-1 - d:-1]) != op.grid.extents:
        raise ShapeError(f"field of shape {v.shape} does not live on grid {op.grid.extents}")


def apply_L(op: CauchyNavierOperator, v: np.ndarray) -> np.ndarray:
    _check(op, v)
    return filter_channels(v, op.half_multipliers, op.grid.dims)


def apply_K(op: CauchyNavierOperator, v: np.ndarray) -> np.ndarray:
    _check(op, v)
    return filter_channels(v, 1.0 / op.half_multipliers, op.grid.dims)
