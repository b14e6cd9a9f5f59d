"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a NumPy array. Every differentiable operation that
touches a tensor with ``requires_grad`` records a :class:`GraphNode` holding
its inputs and a closure that maps the output gradient to input gradients.
:meth:`Tensor.backward` walks the recorded nodes in reverse creation order.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

_node_counter = itertools.count()
_grad_enabled = True


class GraphError(RuntimeError):
    """Raised when the computation graph is malformed (cycles, non-scalar roots)."""


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (inference only)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


class GraphNode:
    """Backward record of one operation.

    ``seq`` is a global creation counter. Inputs are always created before
    the node that consumes them, so descending ``seq`` is a topological order;
    an edge that points forward in ``seq`` can only come from a cycle.
    """

    __slots__ = ("op_kind", "inputs", "backward_fn", "seq")

    def __init__(self, op_kind: str, inputs: Sequence["Tensor"], backward_fn: Callable):
        self.op_kind = op_kind
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn
        self.seq = next(_node_counter)


class Tensor:
    """N-dimensional float array with an optional gradient and graph link."""

    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[GraphNode] = None

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # ---------------------------------------------------------------- backward
    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Populate ``.grad`` on every reachable tensor that requires it.

        Leaf gradients accumulate (``+=``) across calls; call ``zero_grad``
        between optimisation steps. Intermediate gradients are recomputed
        from scratch on each call.
        """
        if grad is None:
            if self.data.size != 1:
                raise GraphError(
                    f"backward() needs a scalar root, got shape {self.shape}; "
                    "pass an explicit output gradient"
                )
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.dtype)
            if grad.shape != self.shape:
                raise GraphError(f"output gradient shape {grad.shape} != {self.shape}")

        order = _topological_order(self)
        pending: dict[int, np.ndarray] = {id(self): grad}
        for t in order:
            if not t.is_leaf:
                t.grad = None

        for t in order:
            g = pending.pop(id(t), None)
            if g is None:
                continue
            if t.requires_grad:
                t.grad = g.copy() if t.grad is None else t.grad + g
            if t.node is None:
                continue
            in_grads = t.node.backward_fn(g)
            for inp, ig in zip(t.node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if ig.shape != inp.shape:
                    raise GraphError(
                        f"{t.node.op_kind}: gradient shape {ig.shape} does not match input {inp.shape}"
                    )
                key = id(inp)
                if key in pending:
                    pending[key] = pending[key] + ig
                else:
                    pending[key] = ig

    # --------------------------------------------------------------- operators
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return swapaxes(self, -1, -2)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def _topological_order(root: Tensor) -> list[Tensor]:
    """Reachable tensors from ``root`` in reverse creation order."""
    seen: dict[int, Tensor] = {id(root): root}
    stack = [root]
    while stack:
        t = stack.pop()
        if t.node is None:
            continue
        for inp in t.node.inputs:
            if inp.node is not None and inp.node.seq >= t.node.seq:
                raise GraphError(
                    f"cycle detected: {t.node.op_kind} consumes a tensor created after it"
                )
            if id(inp) not in seen:
                seen[id(inp)] = inp
                stack.append(inp)
    # leaves sort last; their relative order is irrelevant
    return sorted(seen.values(), key=lambda t: -1 if t.node is None else t.node.seq, reverse=True)


# ---------------------------------------------------------------------- helpers
def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _lift(a, b) -> tuple[Tensor, Tensor]:
    """Coerce a scalar/array operand to a constant tensor of the partner's dtype."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return a, b


def make_result(data: np.ndarray, inputs: Sequence[Tensor], op_kind: str, backward_fn: Callable) -> Tensor:
    """Wrap ``data`` and record a graph node if any input needs gradients."""
    out = Tensor(data)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = GraphNode(op_kind, inputs, backward_fn)
    return out


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of NumPy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ------------------------------------------------------------------ elementwise
def add(a, b) -> Tensor:
    a, b = _lift(a, b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), "add", backward)


def sub(a, b) -> Tensor:
    a, b = _lift(a, b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), "sub", backward)


def mul(a, b) -> Tensor:
    a, b = _lift(a, b)

    def backward(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return make_result(a.data * b.data, (a, b), "mul", backward)


def div(a, b) -> Tensor:
    a, b = _lift(a, b)

    def backward(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return make_result(a.data / b.data, (a, b), "div", backward)


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), "neg", lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    if isinstance(exponent, Tensor):
        raise TypeError("only constant exponents are supported")
    p = float(exponent)

    def backward(g):
        return (g * p * a.data ** (p - 1),)

    return make_result(a.data**p, (a,), "pow", backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_result(out, (a,), "exp", lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return make_result(np.log(a.data), (a,), "log", lambda g: (g / a.data,))


# ---------------------------------------------------------------- linear algebra
def matmul(a, b) -> Tensor:
    """Batched matrix product with NumPy broadcasting over leading axes."""
    a, b = _lift(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return make_result(np.matmul(a.data, b.data), (a, b), "matmul", backward)


def einsum_const(x: Tensor, const: np.ndarray, subscripts: str) -> Tensor:
    """``np.einsum(subscripts, x, const)`` differentiable in ``x`` only.

    ``subscripts`` has the form ``"X,C->O"``. Every index of ``X`` must appear
    in ``C`` or ``O`` so the adjoint ``"O,C->X"`` is well defined.
    """
    lhs, out_sub = subscripts.replace(" ", "").split("->")
    x_sub, c_sub = lhs.split(",")
    adjoint = f"{out_sub},{c_sub}->{x_sub}"

    def backward(g):
        return (np.einsum(adjoint, g, const, optimize=True).astype(x.dtype, copy=False),)

    data = np.einsum(subscripts, x.data, const, optimize=True).astype(x.dtype, copy=False)
    return make_result(data, (x,), "einsum_const", backward)


# -------------------------------------------------------------------- reductions
def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_result(a.data.sum(axis=axes, keepdims=keepdims), (a,), "sum", backward)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return make_result(a.data.mean(axis=axes, keepdims=keepdims), (a,), "mean", backward)


# -------------------------------------------------------------------- reshaping
def reshape(a: Tensor, shape) -> Tensor:
    return make_result(a.data.reshape(shape), (a,), "reshape", lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return make_result(
        np.transpose(a.data, axes), (a,), "transpose", lambda g: (np.transpose(g, inverse),)
    )


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, tuple(axes))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return make_result(data, tensors, "stack", backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result(data, tensors, "concat", backward)
