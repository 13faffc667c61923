"""Tensor type and reverse-mode differentiation.

Every primitive produces a new :class:`Tensor`.  When gradient recording is
enabled and one of the inputs requires a gradient, the result carries a
:class:`Node` that knows how to push an upstream gradient back to its inputs.
:func:`backward` linearises the nodes reachable from a scalar loss into a
:class:`GradTape` and replays it in reverse.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
_grad_enabled = True


class ShapeError(ValueError):
    """Input shapes do not satisfy a primitive's shape rule."""


class NumericOverflowError(FloatingPointError):
    """A primitive produced a NaN or an infinity."""


class BackwardError(RuntimeError):
    """Illegal use of :func:`backward`."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Node:
    __slots__ = ("op", "inputs", "backward_fn", "released")

    def __init__(self, op: str, inputs: tuple, backward_fn: Callable):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.released = False

    def release(self) -> None:
        self.inputs = ()
        self.backward_fn = None
        self.released = True


class Tensor:
    """Dense float array that can take part in differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None
        self.name = name

    @classmethod
    def _from_op(cls, data: np.ndarray, node: Node | None) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = node is not None
        t.grad = None
        t._node = node
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor._from_op(self.data, None)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    # Operator sugar; implementations live in ``ops``.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        if np.isscalar(other):
            return ops.scale(self, float(other))
        return ops.mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        from . import ops
        if np.isscalar(other):
            return ops.scale(self, 1.0 / float(other))
        raise TypeError("division is only defined by a scalar")

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


def _raise_not_scalar(t: Tensor):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


def make_result(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap a primitive's output, checking finiteness and recording a node."""
    if not np.isfinite(data).all():
        shapes = ", ".join(str(t.shape) for t in inputs)
        raise NumericOverflowError(f"{op}: non-finite output (input shapes {shapes})")
    if _grad_enabled and any(t.requires_grad for t in inputs):
        return Tensor._from_op(data, Node(op, tuple(inputs), backward_fn))
    return Tensor._from_op(data, None)


@dataclass
class GradTape:
    """Primitive applications in topological order (inputs before users)."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_loss(cls, loss: Tensor) -> "GradTape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(loss, False)]
        while stack:
            t, expanded = stack.pop()
            node = t._node
            if node is None:
                continue
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            if node.released:
                raise BackwardError(
                    f"backward through '{node.op}' a second time; run the forward pass again first"
                )
            seen.add(id(t))
            stack.append((t, True))
            for inp in node.inputs:
                if inp._node is not None and id(inp) not in seen:
                    stack.append((inp, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Backpropagate from a scalar ``loss``.

    Leaf tensors that require a gradient accumulate into ``.grad``.  The
    returned map holds the gradient for every leaf reached, plus zeros for
    any tensor in ``wrt`` that the loss does not depend on.
    """
    if loss.data.size != 1:
        raise BackwardError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None and not loss.requires_grad:
        raise BackwardError("loss is not connected to any tensor that requires a gradient")
    tape = GradTape.from_loss(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    if loss._node is None:
        leaves[id(loss)] = loss

    for t in reversed(tape.nodes):
        g = grads.pop(id(t), None)
        node = t._node
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            key = id(inp)
            if inp._node is None:
                leaves[key] = inp
            prev = grads.get(key)
            grads[key] = ig if prev is None else prev + ig
    for t in tape.nodes:
        t._node.release()

    out: dict[Tensor, np.ndarray] = {}
    for key, leaf in leaves.items():
        g = np.asarray(grads.get(key, np.zeros_like(leaf.data)), dtype=leaf.dtype)
        if g.shape != leaf.shape:
            g = np.broadcast_to(g, leaf.shape).copy()
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        out[leaf] = g
    if wrt is not None:
        for t in wrt:
            if t not in out:
                out[t] = np.zeros_like(t.data)
    return out
