"""Dense arrays with a small reverse-mode autodiff tape, Adam, and gradient checking.

Only the operations the encoders and the contrastive objective need are
supported. Every op records a backward closure on the output node; calling
:func:`backward` on a scalar walks the graph in reverse topological order and
accumulates gradients into :class:`Parameter` leaves only.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class UnsupportedOperation(TypeError):
    """Raised when a computation outside the supported op set touches a Tensor."""

    def __init__(self, name: str):
        super().__init__(f"unsupported operation in autodiff graph: {name!r}")
        self.op_name = name


class NonFiniteError(FloatingPointError):
    pass


_CHECK_FINITE = False
_GRAD_ENABLED = True


def set_check_finite(flag: bool) -> bool:
    """Toggle per-op finiteness assertions. Returns the previous setting."""
    global _CHECK_FINITE
    prev = _CHECK_FINITE
    _CHECK_FINITE = bool(flag)
    return prev


class no_grad:
    """Context manager: ops inside record no graph (evaluation passes)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev, _GRAD_ENABLED = _GRAD_ENABLED, False

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev


def _check(name: str, arr: np.ndarray) -> None:
    if _CHECK_FINITE and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by {name}")


class Tensor:
    """A numpy array plus the bookkeeping needed for reverse-mode gradients."""

    __slots__ = ("data", "grad", "_parents", "_backward", "op", "requires_grad", "__weakref__")

    # keep numpy from absorbing Tensors into ufuncs / array coercion
    __array_priority__ = 1000

    def __init__(self, data, parents: tuple = (), backward: Callable | None = None,
                 op: str = "leaf", requires_grad: bool | None = None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self._parents = parents
        self._backward = backward
        self.op = op
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        self.requires_grad = requires_grad

    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        op = _UFUNC_OPS.get(ufunc.__name__)
        if method != "__call__" or op is None or kwargs:
            raise UnsupportedOperation(ufunc.__name__)
        return op(*inputs)

    def __array_function__(self, func, types, args, kwargs):
        raise UnsupportedOperation(func.__name__)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op})"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __neg__ = lambda self: mul(self, -1.0)
    __matmul__ = lambda self, o: matmul(self, o)
    __getitem__ = lambda self, idx: getitem(self, idx)

    def __pow__(self, p):
        if p == 2:
            return mul(self, self)
        raise UnsupportedOperation(f"pow({p})")

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Tensor):
    """A named learnable leaf. Gradients accumulate into ``grad``."""

    __slots__ = ("name",)

    def __init__(self, data: np.ndarray, name: str):
        super().__init__(np.array(data, copy=True), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype if dtype is not None else np.float64)
    return Tensor(arr, requires_grad=False)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    # plain numbers adopt the dtype of the tensor they meet
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype), requires_grad=False)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype), requires_grad=False)
    return a, b


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _node(name: str, data: np.ndarray, parents: tuple, backward) -> Tensor:
    _check(name, data)
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    return Tensor(data, parents if needs else (), backward if needs else None, op=name,
                  requires_grad=needs)


# ----------------------------------------------------------------- ops

def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node("mul", a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def bw(g):
        gb = g / b.data
        return _unbroadcast(gb, a.shape), _unbroadcast(-gb * out, b.shape)

    return _node("div", out, (a, b), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim != 2 or b.ndim not in (1, 2):
        raise UnsupportedOperation(f"matmul with shapes {a.shape} @ {b.shape}")

    def bw(g):
        if b.ndim == 1:
            return np.outer(g, b.data), a.data.T @ g
        return g @ b.data.T, a.data.T @ g

    return _node("matmul", a.data @ b.data, (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    return _node("transpose", a.data.T, (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape: tuple) -> Tensor:
    return _node("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def sigmoid(a: Tensor) -> Tensor:
    # tanh form never overflows
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _node("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _node("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a: Tensor) -> Tensor:
    # subgradient 0 at the kink
    mask = a.data > 0
    return _node("relu", np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def bw(g):
        safe = np.where(out > 0, out, 1)
        return (np.where(out > 0, g / (2 * safe), 0).astype(out.dtype),)

    return _node("sqrt", out, (a,), bw)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node("sum", np.asarray(out), (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node("concat", out, tuple(tensors), bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _node("stack", out, tuple(tensors), bw)


def getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]
    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _node("getitem", np.array(out, copy=True) if basic else out, (a,), bw)


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice, type(Ellipsis), type(None))) for i in items)


def gather_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Embedding lookup: ``table[ids]`` for an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.intp)
    out = table.data[ids]

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (full,)

    return _node("gather_rows", out, (table,), bw)


def where(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Select ``a`` where the constant boolean ``mask`` holds, else ``b``."""
    a, b = _pair(a, b)
    mask = np.asarray(mask, dtype=bool)

    def bw(g):
        return (_unbroadcast(np.where(mask, g, 0).astype(g.dtype), a.shape),
                _unbroadcast(np.where(mask, 0, g).astype(g.dtype), b.shape))

    return _node("where", np.where(mask, a.data, b.data), (a, b), bw)


# ----------------------------------------------------------------- backward

def _toposort(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Parameter] | None = None) -> None:
    """Accumulate d(loss)/d(param) into ``param.grad`` for every Parameter reached.

    If ``params`` is given, each must be a Parameter; those not reached by the
    graph simply keep their current (typically zero) gradient.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if params is not None:
        for p in params:
            if not isinstance(p, Parameter):
                raise TypeError(f"expected Parameter, got {type(p).__name__}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_toposort(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            node.grad = node.grad + g if node.grad is not None else g.copy()
            _check(f"grad of {node.name}", node.grad)
            continue
        if node._backward is None:
            raise UnsupportedOperation(node.op)
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


# ----------------------------------------------------------------- Adam

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_param(cls, p: Parameter, beta1=0.9, beta2=0.999, epsilon=1e-8) -> "AdamState":
        return cls(np.zeros_like(p.data), np.zeros_like(p.data), 0, beta1, beta2, epsilon)


def adam_step(params: Sequence[Parameter], states: Sequence[AdamState], learning_rate: float) -> None:
    """One bias-corrected Adam update, in place. Gradients are zeroed afterwards."""
    if learning_rate <= 0:
        raise ValueError("learning_rate must be positive")
    if len(params) != len(states):
        raise ValueError(f"{len(params)} parameters but {len(states)} optimizer states")
    for p, s in zip(params, states):
        if s.m.shape != p.shape or s.v.shape != p.shape:
            raise ValueError(f"optimizer state shape {s.m.shape} does not match {p.name} {p.shape}")
    for p, s in zip(params, states):
        g = p.grad
        s.step_count += 1
        s.m = s.beta1 * s.m + (1 - s.beta1) * g
        s.v = s.beta2 * s.v + (1 - s.beta2) * (g * g)
        m_hat = s.m / (1 - s.beta1 ** s.step_count)
        v_hat = s.v / (1 - s.beta2 ** s.step_count)
        p.data = (p.data - learning_rate * m_hat / (np.sqrt(v_hat) + s.epsilon)).astype(p.dtype)
        p.zero_grad()


class Adam:
    def __init__(self, params: Sequence[Parameter], lr: float = 5e-4,
                 beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.states = [AdamState.for_param(p, beta1, beta2, epsilon) for p in self.params]

    def step(self) -> None:
        adam_step(self.params, self.states, self.lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


# ----------------------------------------------------------------- grad check

@dataclass
class GradCheckReport:
    errors: dict[str, float] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def passed(self, tolerance: float) -> bool:
        return self.max_error < tolerance

    def __str__(self):
        return "\n".join(f"{k}: {v:.3e}" for k, v in self.errors.items())


def numeric_grad(closure: Callable[[], Tensor], p: Parameter, epsilon: float = 1e-5) -> np.ndarray:
    """Central finite differences of ``closure()`` with respect to every entry of ``p``."""
    num = np.zeros_like(p.data)
    flat = p.data.reshape(-1)
    out = num.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        hi = float(closure().data)
        flat[i] = orig - epsilon
        lo = float(closure().data)
        flat[i] = orig
        out[i] = (hi - lo) / (2 * epsilon)
    return num


def grad_check(closure: Callable[[], Tensor], params: Sequence[Parameter],
               epsilon: float = 1e-5, tolerance: float | None = None) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    The closure must be deterministic (no dropout) and should run in float64.
    Per parameter the report holds
    ``max |analytic - numeric| / max(1e-8, |analytic| + |numeric|)``.
    ``tolerance`` is informational; use :meth:`GradCheckReport.passed`.
    """
    for p in params:
        p.zero_grad()
    backward(closure(), params)
    report = GradCheckReport()
    for p in params:
        analytic = p.grad.copy()
        numeric = numeric_grad(closure, p, epsilon)
        denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
        report.errors[p.name] = float(np.max(np.abs(analytic - numeric) / denom)) if p.data.size else 0.0
        p.zero_grad()
    return report


# numpy scalars on the left of an operator dispatch through __array_ufunc__
_UFUNC_OPS = {"add": add, "subtract": sub, "multiply": mul, "divide": div,
              "true_divide": div, "matmul": matmul}
