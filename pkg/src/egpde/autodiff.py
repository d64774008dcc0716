"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every differentiable operation is a :class:`Function` subclass with a
``forward`` over numpy arrays and a ``backward`` returning one gradient per
input.  The graph is rebuilt on every forward pass and released by
:func:`backward`; calling it twice on the same graph is an error.

Binary elementwise ops require equal shapes.  Python scalars are accepted as
constants.  The only broadcasting is the explicit bias row in :func:`linear`
and the shared weight of ``linear``/``matmul`` across leading batch axes.
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class BackwardError(RuntimeError):
    pass


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


_CONSUMED = object()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_ctx")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite value in tensor {name or ''}".rstrip())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.name = name
        self._ctx = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.name = None
        t._ctx = None
        return t

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._ctx is None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def softplus(self):
        return softplus(self)

    def ln(self):
        return ln(self)

    def exp(self):
        return exp(self)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


Operand = Union[Tensor, float, int]


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, op: str) -> None:
    # a finite sum implies finite entries; only scan when the sum is not
    if math.isfinite(np.add.reduce(arr, None)) or np.all(np.isfinite(arr)):
        return
    bad = tuple(int(i) for i in np.argwhere(~np.isfinite(arr))[0])
    raise NonFiniteError(f"{op}: non-finite output at index {bad}")


class Function:
    """One recorded operation: inputs, cached values, and a local backward rule."""

    def __init__(self, *inputs: Tensor):
        self.inputs = inputs

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs) -> Tensor:
        fn = cls(*inputs)
        out = fn.forward(*(t.data for t in inputs), **kwargs)
        _check_finite(out, cls.__name__)
        result = Tensor._wrap(out)
        if is_grad_enabled() and any(t.requires_grad for t in inputs):
            result.requires_grad = True
            result._ctx = fn
        return result


def _require_same_shape(op: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


class Add(Function):
    def forward(self, a, b):
        _require_same_shape("add", a, b)
        return a + b

    def backward(self, grad):
        return grad, grad


class Sub(Function):
    def forward(self, a, b):
        _require_same_shape("sub", a, b)
        return a - b

    def backward(self, grad):
        return grad, -grad


class Mul(Function):
    def forward(self, a, b):
        _require_same_shape("mul", a, b)
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return grad * self.b, grad * self.a


class AddConst(Function):
    def forward(self, a, c):
        return a + c

    def backward(self, grad):
        return (grad,)


class Scale(Function):
    def forward(self, a, c):
        self.c = c
        return a * c

    def backward(self, grad):
        return (grad * self.c,)


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


class Tanh(Function):
    def forward(self, a):
        self.out = np.tanh(a)
        return self.out

    def backward(self, grad):
        return (grad * (1.0 - self.out * self.out),)


class Sigmoid(Function):
    def forward(self, a):
        # split by sign so exp never overflows
        e = np.exp(-np.abs(a))
        self.out = np.where(a >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return self.out

    def backward(self, grad):
        return (grad * self.out * (1.0 - self.out),)


class Softplus(Function):
    def forward(self, a):
        self.a = a
        return np.maximum(a, 0.0) + np.log1p(np.exp(-np.abs(a)))

    def backward(self, grad):
        a = self.a
        e = np.exp(-np.abs(a))
        return (grad * np.where(a >= 0, 1.0, e) / (1.0 + e),)


class Ln(Function):
    def forward(self, a):
        if np.any(a <= 0):
            idx = tuple(int(i) for i in np.argwhere(a <= 0)[0])
            raise DomainError(f"ln: non-positive input {a[idx]!r} at index {idx}")
        self.a = a
        return np.log(a)

    def backward(self, grad):
        return (grad / self.a,)


class Exp(Function):
    def forward(self, a):
        with np.errstate(over="ignore"):  # overflow is reported by the finiteness check
            self.out = np.exp(a)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class MatMul(Function):
    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
        if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
            raise ShapeError(f"matmul: batch dimensions differ, {a.shape} @ {b.shape}")
        self.a, self.b = a, b
        return a @ b

    def backward(self, grad):
        a, b = self.a, self.b
        ga = grad @ np.swapaxes(b, -1, -2)
        if b.ndim == 2 and a.ndim > 2:
            gb = a.reshape(-1, a.shape[-1]).T @ grad.reshape(-1, grad.shape[-1])
        else:
            gb = np.swapaxes(a, -1, -2) @ grad
        return ga, gb


class Linear(Function):
    """y = x W^T + b over the trailing axis of x; the bias is optional."""

    def forward(self, x, w, b=None):
        if w.ndim != 2 or x.shape[-1] != w.shape[1]:
            raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
        if b is not None and b.shape != (w.shape[0],):
            raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")
        self.x, self.w = x, w
        y = x @ w.T
        if b is not None:
            y = y + b
        return y

    def backward(self, grad):
        x2 = self.x.reshape(-1, self.x.shape[-1])
        g2 = grad.reshape(-1, grad.shape[-1])
        gx = grad @ self.w
        gw = g2.T @ x2
        if len(self.inputs) == 3:
            return gx, gw, g2.sum(axis=0)
        return gx, gw


class SoftmaxRows(Function):
    def forward(self, a):
        shifted = a - a.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        self.out = e / e.sum(axis=-1, keepdims=True)
        return self.out

    def backward(self, grad):
        s = self.out
        return (s * (grad - (grad * s).sum(axis=-1, keepdims=True)),)


class Sum(Function):
    def forward(self, a, axis=None):
        self.shape, self.axis = a.shape, axis
        out = a.sum(axis=axis)
        return np.asarray(out).reshape(1) if axis is None else out

    def backward(self, grad):
        if self.axis is None:
            return (np.broadcast_to(grad.reshape(()), self.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(grad, self.axis), self.shape).copy(),)


class Reshape(Function):
    def forward(self, a, shape=None):
        self.orig = a.shape
        return a.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.orig),)


class SwapLast(Function):
    def forward(self, a):
        return np.swapaxes(a, -1, -2).copy()

    def backward(self, grad):
        return (np.swapaxes(grad, -1, -2).copy(),)


class Concat(Function):
    def forward(self, *arrays, axis=-1):
        self.axis = axis
        self.sizes = [a.shape[axis] for a in arrays]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        cuts = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, cuts, axis=self.axis))


class Stack(Function):
    def forward(self, *arrays, axis=0):
        self.axis = axis
        return np.stack(arrays, axis=axis)

    def backward(self, grad):
        n = grad.shape[self.axis]
        return tuple(np.take(grad, i, axis=self.axis) for i in range(n))


class Slice(Function):
    """Contiguous slice [start, stop) along the trailing axis."""

    def forward(self, a, start=0, stop=None):
        self.shape, self.start, self.stop = a.shape, start, stop
        return a[..., start:stop].copy()

    def backward(self, grad):
        g = np.zeros(self.shape)
        g[..., self.start:self.stop] = grad
        return (g,)


class Select(Function):
    """Pick index i along a given axis, dropping that axis."""

    def forward(self, a, index=0, axis=0):
        self.shape, self.index, self.axis = a.shape, index, axis
        return np.take(a, index, axis=axis)

    def backward(self, grad):
        g = np.zeros(self.shape)
        sl = [slice(None)] * len(self.shape)
        sl[self.axis] = self.index
        g[tuple(sl)] = grad
        return (g,)


# functional API

def add(a: Operand, b: Operand) -> Tensor:
    if not isinstance(b, Tensor):
        return AddConst.apply(as_tensor(a), c=float(b))
    if not isinstance(a, Tensor):
        return AddConst.apply(b, c=float(a))
    return Add.apply(a, b)


def sub(a: Operand, b: Operand) -> Tensor:
    if not isinstance(b, Tensor):
        return AddConst.apply(as_tensor(a), c=-float(b))
    if not isinstance(a, Tensor):
        return AddConst.apply(Neg.apply(b), c=float(a))
    return Sub.apply(a, b)


def mul(a: Operand, b: Operand) -> Tensor:
    if not isinstance(b, Tensor):
        return Scale.apply(as_tensor(a), c=float(b))
    if not isinstance(a, Tensor):
        return Scale.apply(b, c=float(a))
    return Mul.apply(a, b)


def neg(a: Tensor) -> Tensor:
    return Neg.apply(a)


def tanh(a: Tensor) -> Tensor:
    return Tanh.apply(a)


def sigmoid(a: Tensor) -> Tensor:
    return Sigmoid.apply(a)


def softplus(a: Tensor) -> Tensor:
    return Softplus.apply(a)


def ln(a: Tensor) -> Tensor:
    return Ln.apply(a)


def exp(a: Tensor) -> Tensor:
    return Exp.apply(a)


_UNARY = {"tanh": tanh, "sigmoid": sigmoid, "softplus": softplus, "ln": ln, "exp": exp, "neg": neg}
_BINARY = {"add": add, "mul": mul}


def elementwise(kind: str, *args: Operand) -> Tensor:
    """Dispatch an elementwise op by name (add, mul, tanh, sigmoid, softplus, ln, exp, neg)."""
    if kind in _UNARY:
        if len(args) != 1:
            raise TypeError(f"{kind} takes one operand, got {len(args)}")
        return _UNARY[kind](as_tensor(args[0]))
    if kind in _BINARY:
        if len(args) != 2:
            raise TypeError(f"{kind} takes two operands, got {len(args)}")
        return _BINARY[kind](*args)
    raise ValueError(f"unknown elementwise op {kind!r}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return MatMul.apply(a, b)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    if bias is None:
        return Linear.apply(x, weight)
    return Linear.apply(x, weight, bias)


def softmax_rows(a: Tensor) -> Tensor:
    return SoftmaxRows.apply(a)


def sum_(a: Tensor, axis: Optional[int] = None) -> Tensor:
    return Sum.apply(a, axis=axis)


def mean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return Scale.apply(Sum.apply(a, axis=axis), c=1.0 / n)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return Reshape.apply(a, shape=tuple(shape))


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    return SwapLast.apply(a)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Stack.apply(*tensors, axis=axis)


def slice_last(a: Tensor, start: int, stop: Optional[int]) -> Tensor:
    return Slice.apply(a, start=start, stop=stop)


def select(a: Tensor, index: int, axis: int = 0) -> Tensor:
    return Select.apply(a, index=index, axis=axis)


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    seen = set()
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
        ctx = node._ctx
        if ctx is not None and ctx is not _CONSUMED:
            for parent in ctx.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf.

    The graph is released afterwards; a second call raises BackwardError.
    """
    if loss.size != 1:
        raise BackwardError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._ctx is _CONSUMED:
        raise BackwardError("graph already consumed by a previous backward; run the forward pass again")
    if not loss.requires_grad:
        raise BackwardError("loss does not depend on any tensor that requires grad")

    tape = _topological_order(loss)
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape):
        g = grads.pop(id(node), None)
        ctx = node._ctx
        if ctx is None:
            if g is not None:
                node.grad = node.grad + g if node.grad is not None else g.copy()
            continue
        if ctx is _CONSUMED:
            raise BackwardError("graph already consumed by a previous backward; run the forward pass again")
        if g is None:
            continue
        for parent, pg in zip(ctx.inputs, ctx.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for node in tape:
        if node._ctx is not None:
            node._ctx = _CONSUMED


ParamSpec = Union[Mapping[str, Tensor], Sequence[Tensor]]


def _named(params: ParamSpec) -> List[Tuple[str, Tensor]]:
    if isinstance(params, Mapping):
        return list(params.items())
    return [(p.name or f"param{i}", p) for i, p in enumerate(params)]


def grad_check(f: Callable[[], Tensor], params: ParamSpec, eps: float = 1e-5) -> float:
    """Max relative error between backprop and central differences.

    ``f`` takes no arguments and reads the parameters in place; it must be
    deterministic.  Each parameter entry is perturbed by +-eps in turn.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    named = _named(params)
    for _, p in named:
        p.zero_grad()
    loss = f()
    backward(loss)
    worst = 0.0
    for name, p in named:
        analytic = p.grad.copy()
        flat = p.data.reshape(-1)
        an_flat = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            try:
                with no_grad():
                    flat[i] = orig + eps
                    f_plus = f().item()
                    flat[i] = orig - eps
                    f_minus = f().item()
            except (NonFiniteError, DomainError) as exc:
                raise NonFiniteError(f"grad_check: non-finite evaluation while perturbing {name}[{i}]: {exc}") from exc
            finally:
                flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * eps)
            a = an_flat[i]
            rel = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
            worst = max(worst, rel)
        p.zero_grad()
    return worst
