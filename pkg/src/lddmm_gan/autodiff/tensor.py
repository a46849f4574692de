"""Tensor and Tape: a small dynamic reverse-mode engine over numpy arrays.

Operations only record onto a tape while one is active (``with Tape() as t``);
outside a tape they are plain numpy computations.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import UsageError

DEFAULT_DTYPE = np.float32

_ACTIVE: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
        self.data = np.ascontiguousarray(arr, dtype=dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self):
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # arithmetic sugar; the implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.scalar_mul(self, -1.0)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    Usage::

        with Tape() as tape:
            loss = ...
        grads = tape.backward(loss, wrt=params)
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def backward(self, loss: Tensor, wrt: Sequence[Tensor] | None = None):
        return backward(self, loss, wrt)


def active_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record(out_data: np.ndarray, inputs: Sequence[Tensor],
           backward: Callable[[np.ndarray], Sequence]) -> Tensor:
    """Wrap a forward result and, if needed, put its backward rule on the tape.

    ``backward(g)`` returns one gradient (or ``None``) per input.
    """
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(_Node(out, tuple(inputs), backward))
    return out


def backward(tape: Tape, loss: Tensor, wrt: Sequence[Tensor] | None = None):
    """Reverse sweep from a scalar ``loss``.

    Sets ``.grad`` on every leaf tensor that requires grad and returns the list
    of gradients for ``wrt`` (zeros for tensors that did not take part).
    """
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not tape.nodes:
        raise UsageError("backward called on an empty tape (run the forward pass first)")
    grads: dict[int, np.ndarray] = {}
    produced = {id(n.out) for n in tape.nodes}
    if loss.requires_grad:
        if id(loss) not in produced:
            raise UsageError("loss was not recorded on this tape")
        grads[id(loss)] = np.ones_like(loss.data)
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if id(t) not in produced:
                leaves[id(t)] = t
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    for key, t in leaves.items():
        t.grad = grads.get(key, np.zeros_like(t.data)).astype(t.dtype, copy=False)
    if wrt is None:
        return None
    out = []
    for t in wrt:
        g = grads.get(id(t))
        if g is None:
            g = np.zeros_like(t.data)
            t.grad = g
        out.append(g.astype(t.dtype, copy=False))
    return out
