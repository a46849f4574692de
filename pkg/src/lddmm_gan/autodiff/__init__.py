"""Minimal reverse-mode differentiation over numpy arrays."""
from .tensor import DEFAULT_DTYPE, Tape, Tensor, as_tensor, backward
from . import ops, layers

__all__ = ["DEFAULT_DTYPE", "Tape", "Tensor", "as_tensor", "backward", "ops", "layers"]
