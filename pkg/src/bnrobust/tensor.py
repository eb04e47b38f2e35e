"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable op records a node (parents plus a local backward rule)
on the output tensor. ``Tensor.backward`` walks the nodes reachable from a
scalar loss once, in reverse topological order, accumulates gradients into
leaves and then releases the graph: a tape serves exactly one backward pass.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence, Union

import numpy as np

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True
_DEBUG = False


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    """Raised in debug mode when an op produces NaN or Inf."""


class TapeConsumedError(RuntimeError):
    pass


@contextlib.contextmanager
def no_grad():
    """Run ops without recording them for backward."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def debug_mode(enabled: bool = True):
    """Check every op output for NaN/Inf and raise ``NonFiniteError``."""
    global _DEBUG
    prev = _DEBUG
    _DEBUG = enabled
    try:
        yield
    finally:
        _DEBUG = prev


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily change the dtype used for new tensors (oracles use float64)."""
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


def get_default_dtype():
    return _DEFAULT_DTYPE


ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]


class Tensor:
    """An n-dimensional array with an optional gradient slot."""

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.ascontiguousarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._consumed = False

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = False
        t._parents = ()
        t._backward = None
        t._consumed = False
        return t

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- autodiff ---------------------------------------------------------
    def backward(self) -> None:
        """Populate ``.grad`` of every requires-grad leaf reachable from this scalar."""
        if self._consumed:
            raise TapeConsumedError("tape already consumed by a previous backward()")
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise RuntimeError("loss does not require grad; nothing to differentiate")

        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise ShapeError(f"gradient shape {pg.shape} != tensor shape {parent.shape}")
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            if node._backward is not None:
                node._backward = None
                node._parents = ()
                node._consumed = True

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return elementwise("add", self, other)

    def __radd__(self, other):
        return elementwise("add", self, other)

    def __sub__(self, other):
        return elementwise("sub", self, other)

    def __rsub__(self, other):
        return elementwise("sub", _as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return elementwise("mul", self, other)

    def __rmul__(self, other):
        return elementwise("mul", self, other)

    def __truediv__(self, other):
        return elementwise("div", self, other)

    def __rtruediv__(self, other):
        return elementwise("div", _as_tensor(other, self.dtype), self)

    def __neg__(self):
        return elementwise("mul", self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def relu(self):
        return relu(self)


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def make_result(data: np.ndarray, parents: tuple, backward: Callable) -> Tensor:
    """Wrap an op output and record its node when any parent needs a gradient."""
    out = Tensor._wrap(data)
    if _DEBUG and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced (shape {data.shape})")
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise -----------------------------------------------------------

_BINARY = ("add", "sub", "mul", "div", "maximum")


def elementwise(kind: str, a: ArrayLike, b: ArrayLike) -> Tensor:
    """Binary elementwise op with numpy broadcasting."""
    if kind not in _BINARY:
        raise ValueError(f"unknown elementwise op {kind!r}; expected one of {_BINARY}")
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    try:
        out_shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None
    x, y = a.data, b.data
    if kind == "add":
        data = x + y
    elif kind == "sub":
        data = x - y
    elif kind == "mul":
        data = x * y
    elif kind == "div":
        data = x / y
    else:
        data = np.maximum(x, y)
    data = np.asarray(data, dtype=np.result_type(x, y))

    def backward(g):
        ga = gb = None
        if kind == "add":
            ga, gb = g, g
        elif kind == "sub":
            ga, gb = g, -g
        elif kind == "mul":
            ga = g * y if a.requires_grad else None
            gb = g * x if b.requires_grad else None
        elif kind == "div":
            ga = g / y if a.requires_grad else None
            gb = -g * x / (y * y) if b.requires_grad else None
        else:
            pick = x >= y
            ga, gb = g * pick, g * ~pick
        return (
            unbroadcast(np.broadcast_to(ga, out_shape), a.shape) if ga is not None else None,
            unbroadcast(np.broadcast_to(gb, out_shape), b.shape) if gb is not None else None,
        )

    return make_result(data, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    # derivative at exactly 0 is 0
    mask = x.data > 0
    return make_result(np.maximum(x.data, 0, dtype=x.dtype), (x,), lambda g: (g * mask,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_result(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return make_result(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return make_result(out, (x,), lambda g: (g * 0.5 / out,))


# -- shape and reductions ---------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def tensor_sum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    src = x.shape
    data = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return make_result(data, (x,), backward)


def tensor_mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        count = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[ax] for ax in axes]))
    return tensor_sum(x, axis, keepdims) * (1.0 / count)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} @ {b.shape} are incompatible")
    x, y = a.data, b.data

    def backward(g):
        return (
            g @ y.T if a.requires_grad else None,
            x.T @ g if b.requires_grad else None,
        )

    return make_result(x @ y, (a, b), backward)
