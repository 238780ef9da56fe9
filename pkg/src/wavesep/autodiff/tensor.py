"""Tensor with a recorded backward graph, and the reverse-mode driver."""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Sequence

import numpy as np

from ..errors import ContractError

class _ModeState(threading.local):
    """Grad mode and creation dtype, per thread so concurrent inference cannot clobber them."""

    grad_enabled = True
    dtype = np.float32


_mode = _ModeState()


def get_dtype():
    return _mode.dtype


@contextlib.contextmanager
def precision(dtype):
    """Create new tensors in ``dtype`` (float64 is the gradient-check shadow mode)."""
    previous, _mode.dtype = _mode.dtype, np.dtype(dtype).type
    try:
        yield
    finally:
        _mode.dtype = previous


@contextlib.contextmanager
def no_grad():
    previous, _mode.grad_enabled = _mode.grad_enabled, False
    try:
        yield
    finally:
        _mode.grad_enabled = previous


def grad_enabled() -> bool:
    return _mode.grad_enabled


class Tensor:
    """N-d array that can sit in a backward graph.

    ``backward_fn`` receives the upstream gradient and returns one gradient
    (or None) per parent, in parent order.
    """

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _mode.dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; the functions live in ops to keep gradients in one place.
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
        return ops.scale(self, -1.0)

    def __truediv__(self, other: float):
        from . import ops
        return ops.scale(self, 1.0 / other)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis, keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _mode.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
        out.op = op
    return out


def backward(loss: Tensor, grad: np.ndarray | None = None) -> int:
    """Accumulate d(loss)/d(leaf) into every leaf's ``grad``.

    Each node is visited exactly once, in reverse topological order. Returns
    the number of nodes visited.
    """
    if grad is None:
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    pending: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=loss.data.dtype)}
    visits = 0
    for node in reversed(order):
        g = pending.pop(id(node), None)
        visits += 1
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg
    return visits
