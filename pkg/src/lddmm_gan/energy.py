"""LDDMM energies (stationary and geodesic-shooting) and the relative MSE metric."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, layers, ops
from .diffeo import DEFAULT_SQUARINGS, DEFAULT_STEPS
from .errors import InvalidParameterError, ShapeError, UndefinedMetricError
from .spectral import CauchyNavierOperator

PARAMETERIZATIONS = ("stationary", "epdiff")


@dataclass
class EnergyConfig:
    operator: CauchyNavierOperator
    sigma2: float = 1.0
    parameterization: str = "stationary"
    T: int = DEFAULT_STEPS
    squarings: int = DEFAULT_SQUARINGS
    exp_method: str = "squaring"   # or "euler": T transport steps for the SVF exponential

    def __post_init__(self):
        if not self.sigma2 > 0:
            raise InvalidParameterError(f"sigma2 must be positive, got {self.sigma2}")
        if self.T < 1:
            raise InvalidParameterError(f"T must be >= 1, got {self.T}")
        if self.parameterization not in PARAMETERIZATIONS:
            raise InvalidParameterError(f"unknown parameterization {self.parameterization!r}")
        if self.exp_method not in ("squaring", "euler"):
            raise InvalidParameterError(f"unknown exp_method {self.exp_method!r}")


@dataclass
class EnergyTerms:
    """Per-pair ``(B,)`` tensors plus the map and the warped source."""

    total: Tensor
    regularizer: Tensor
    image: Tensor
    phi_inv: Tensor
    warped: Tensor


def inverse_map(v: Tensor, cfg: EnergyConfig) -> Tensor:
    """Displacement of ``(phi_1^v)^-1`` for a batch of velocity fields."""
    if cfg.parameterization == "epdiff":
        flow = layers.epdiff_shoot_layer(v, cfg.operator, cfg.T)
        return layers.euler_transport_layer(flow)
    if cfg.exp_method == "euler":
        return layers.euler_transport_layer([v] * (cfg.T + 1))
    return layers.exp_svf_layer(ops.scalar_mul(v, -1.0), cfg.squarings)


def energy_terms(v, I0, I1, cfg: EnergyConfig) -> EnergyTerms:
    """Batched energy: ``v: (B, *S, d)``, images ``(B, *S)``."""
    v = v if isinstance(v, Tensor) else Tensor(v)
    I0 = I0 if isinstance(I0, Tensor) else Tensor(I0, dtype=v.dtype)
    I1 = I1 if isinstance(I1, Tensor) else Tensor(I1, dtype=v.dtype)
    grid = cfg.operator.grid
    if tuple(v.shape[1:-1]) != grid.extents or I0.shape != I1.shape or I0.shape != v.shape[:-1]:
        raise ShapeError(f"velocity {v.shape}, source {I0.shape} and target {I1.shape} "
                         f"do not share the grid {grid.extents}")
    d = grid.dims
    measure = grid.cell_volume
    spatial = tuple(range(1, v.ndim))
    Lv = ops.spectral_filter(v, cfg.operator.half_multipliers, d)
    reg = ops.scalar_mul(ops.sum(ops.mul(Lv, v), axis=spatial), 0.5 * measure)
    phi_inv = inverse_map(v, cfg)
    warped = layers.warp_image(I0, phi_inv)
    resid = ops.sub(warped, I1)
    img = ops.scalar_mul(ops.sum_of_squares(resid, axis=tuple(range(1, I0.ndim))), measure / cfg.sigma2)
    return EnergyTerms(ops.add(reg, img), reg, img, phi_inv, warped)


def _single(v, I0, I1, cfg, parameterization):
    batched = isinstance(v, Tensor)
    if cfg.parameterization != parameterization:
        cfg = EnergyConfig(cfg.operator, cfg.sigma2, parameterization, cfg.T, cfg.squarings, cfg.exp_method)
    if batched:
        return energy_terms(v, I0, I1, cfg).total
    v = np.asarray(v)
    terms = energy_terms(Tensor(v[None]), np.asarray(I0)[None], np.asarray(I1)[None], cfg)
    return float(terms.total.data[0])


def energy_stationary(v, I0, I1, cfg: EnergyConfig):
    """``1/2 <Lv, v> + 1/sigma^2 ||I0 o exp(-v) - I1||^2`` (discrete L2 with cell measure).

    Unbatched arrays give a float; batched tensors give a ``(B,)`` tensor.
    """
    return _single(v, I0, I1, cfg, "stationary")


def energy_shooting(v0, I0, I1, cfg: EnergyConfig):
    """``1/2 <Lv0, v0> + 1/sigma^2 ||I0 o phi_1^-1 - I1||^2`` with the flow from EPDiff."""
    return _single(v0, I0, I1, cfg, "epdiff")


def mse_rel(I0, I1, Iw) -> float:
    """``||Iw - I1||^2 / ||I0 - I1||^2``."""
    I0, I1, Iw = (np.asarray(a, dtype=np.float64) for a in (I0, I1, Iw))
    den = np.sum((I0 - I1) ** 2)
    if den == 0:
        raise UndefinedMetricError("mse_rel is undefined for identical source and target")
    return float(np.sum((Iw - I1) ** 2) / den)


def mse(I1, Iw) -> float:
    I1, Iw = np.asarray(I1, dtype=np.float64), np.asarray(Iw, dtype=np.float64)
    return float(np.mean((Iw - I1) ** 2))
