"""Velocity fields to diffeomorphisms: Euler transport, scaling-and-squaring, EPDiff shooting.

These are the plain numpy integrators. The differentiable (tape-recorded)
counterparts live in :mod:`lddmm_gan.autodiff.layers` and are checked against
these in the test suite.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import grid as G
from .errors import DivergenceError, InvalidParameterError, ShapeError
from .spectral import CauchyNavierOperator, apply_K, apply_L

DEFAULT_STEPS = 10
DEFAULT_SQUARINGS = 6


@dataclass
class VelocityFlow:
    """Velocity fields sampled at ``t_j = j / T``, ``j = 0..T``."""

    steps: list

    def __post_init__(self):
        if len(self.steps) < 2:
            raise InvalidParameterError("a flow needs at least T + 1 = 2 samples")
        shape = self.steps[0].shape
        for j, v in enumerate(self.steps):
            if v.shape != shape:
                raise ShapeError(f"flow sample {j} has shape {v.shape}, expected {shape}")

    @property
    def T(self) -> int:
        return len(self.steps) - 1


def integrate_transport(flow: VelocityFlow) -> np.ndarray:
    """Forward Euler for ``d/dt phi^-1 = -v_t o phi^-1`` with ``phi_0^-1 = id``.

    Returns the displacement of ``phi_1^-1``.
    """
    dt = 1.0 / flow.T
    u = np.zeros_like(flow.steps[0])
    for v in flow.steps[:-1]:
        u = u - dt * G.warp_field(v, u)
    return u


def exp_svf(v: np.ndarray, squarings: int = DEFAULT_SQUARINGS) -> np.ndarray:
    """Group exponential of a stationary velocity field by scaling and squaring."""
    if squarings < 1:
        raise InvalidParameterError(f"squarings must be >= 1, got {squarings}")
    u = v / 2.0**squarings
    for _ in range(squarings):
        u = G.compose(u, u)
    return u


def exp_svf_euler(v: np.ndarray, steps: int = DEFAULT_STEPS) -> np.ndarray:
    """Alternative exponential: ``steps`` Euler steps of the transport equation
    with the stationary flow ``-v`` (so the result approximates ``exp(v)``)."""
    return integrate_transport(VelocityFlow([-v] * (steps + 1)))


def epdiff_rhs(v: np.ndarray, op: CauchyNavierOperator) -> np.ndarray:
    """``K[(Dv)^T Lv + D(Lv) v + Lv div v]``."""
    m = apply_L(op, v)
    Dv = G.jacobian(v)
    Dm = G.jacobian(m)
    div = np.trace(Dv, axis1=-2, axis2=-1)
    rhs = (np.einsum("...ji,...j->...i", Dv, m)
           + np.einsum("...ij,...j->...i", Dm, v)
           + m * div[..., None])
    return apply_K(op, rhs)


def shoot_epdiff(v0: np.ndarray, op: CauchyNavierOperator, T: int = DEFAULT_STEPS) -> VelocityFlow:
    """Integrate EPDiff from the initial velocity ``v0`` with ``T`` Euler steps."""
    if T < 1:
        raise InvalidParameterError(f"T must be >= 1, got {T}")
    if tuple(v0.shape[:-1]) != op.grid.extents:
        raise ShapeError(f"v0 grid {v0.shape[:-1]} does not match operator grid {op.grid.extents}")
    dt = 1.0 / T
    steps = [v0]
    v = v0
    for j in range(T):
        v = v - dt * epdiff_rhs(v, op)
        if not np.all(np.isfinite(v)):
            raise DivergenceError(f"EPDiff shooting diverged at step {j + 1}", step=j + 1)
        steps.append(v)
    return VelocityFlow(steps)
