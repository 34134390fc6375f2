"""Dense reverse-mode automatic differentiation on float64 numpy arrays.

Every op returns a new :class:`Tensor` that remembers its inputs and a
closure mapping the output gradient to input gradients.  Calling
:meth:`Tensor.backward` on a scalar collects the reachable nodes into a
:class:`ComputeGraph` (inputs always before outputs) and replays it in
reverse.  The graph is rebuilt on every forward pass.

Binary elementwise ops accept equal shapes or a scalar operand; nothing
else broadcasts.  Batched matmul requires identical leading dimensions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

LEAKY_SLOPE = 0.2
# gradients below this magnitude count as zero when scaling gradcheck errors
GRAD_FLOOR = 1e-6


class DimensionError(ValueError):
    pass


class DomainError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


def _as_array(data) -> np.ndarray:
    arr = np.array(data, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _op: str = "leaf"):
        self.data = data if isinstance(data, np.ndarray) and data.dtype == np.float64 and data.ndim > 0 else _as_array(data)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op = _op
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={list(self.shape)}, op={self.op}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {list(self.shape)}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # ------------------------------------------------------------------ graph
    def backward(self) -> None:
        if self.size != 1:
            raise ContractError(f"backward() needs a scalar root, got shape {list(self.shape)}")
        if not self.requires_grad:
            raise ContractError("backward() root does not require grad")
        graph = ComputeGraph.from_root(self)
        graph.run_backward(self)

    # ------------------------------------------------------------------ operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def sum(self, axis: int | None = None) -> Tensor:
        return tsum(self, axis)

    def mean(self, axis: int | None = None) -> Tensor:
        return mean(self, axis)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


@dataclass
class ComputeGraph:
    """Nodes reachable from a root, stored so every input precedes its outputs."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> ComputeGraph:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def run_backward(self, root: Tensor) -> None:
        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(_as_array(data), requires_grad=requires_grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(_as_array(x))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], op: str, backward) -> Tensor:
    out = Tensor(np.asarray(data, dtype=np.float64), _parents=parents, _op=op)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._backward = backward
    else:
        out._parents = ()
    return out


def _is_scalar(t: Tensor) -> bool:
    return t.size == 1


def _binary_shapes(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise DimensionError(f"{op}: incompatible shapes {list(a.shape)} and {list(b.shape)}")


def _unbroadcast(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.shape:
        return g
    return np.full(t.shape, g.sum())


def _scalar_value(t: Tensor, other: Tensor) -> np.ndarray | float:
    # scalar operands collapse to a float so numpy broadcasting stays trivial
    if t.shape != other.shape and _is_scalar(t):
        return float(t.data.reshape(-1)[0])
    return t.data


# ---------------------------------------------------------------------- elementwise
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("add", a, b)
    av, bv = _scalar_value(a, b), _scalar_value(b, a)
    return _make(av + bv, (a, b), "add", lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("sub", a, b)
    av, bv = _scalar_value(a, b), _scalar_value(b, a)
    return _make(av - bv, (a, b), "sub", lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("mul", a, b)
    av, bv = _scalar_value(a, b), _scalar_value(b, a)
    return _make(av * bv, (a, b), "mul", lambda g: (_unbroadcast(g * bv, a), _unbroadcast(g * av, b)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("div", a, b)
    if np.any(b.data == 0.0):
        raise DomainError("div: zero in denominator")
    av, bv = _scalar_value(a, b), _scalar_value(b, a)
    out = av / bv
    return _make(out, (a, b), "div", lambda g: (_unbroadcast(g / bv, a), _unbroadcast(-g * out / bv, b)))


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), "scalar_mul", lambda g: (g * c,))


def abs(a: Tensor) -> Tensor:  # noqa: A001 - mirrors the op name
    sign = np.sign(a.data)  # sign(0) == 0 gives the zero subgradient at the kink
    return _make(np.abs(a.data), (a,), "abs", lambda g: (g * sign,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise DomainError(f"log: non-positive input (min {a.data.min():.3g})")
    x = a.data
    return _make(np.log(x), (a,), "log", lambda g: (g / x,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), "exp", lambda g: (g * out,))


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0.0):
        raise DomainError("sqrt: negative input")
    out = np.sqrt(a.data)
    safe = np.where(out > 0.0, out, 1.0)

    def back(g):
        return (np.where(out > 0.0, g / (2.0 * safe), 0.0),)

    return _make(out, (a,), "sqrt", back)


def square(a: Tensor) -> Tensor:
    x = a.data
    return _make(x * x, (a,), "square", lambda g: (2.0 * g * x,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (a,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), "tanh", lambda g: (g * (1.0 - out * out),))


def leaky_relu(a: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    scale = np.where(a.data > 0.0, 1.0, slope)
    return _make(a.data * scale, (a,), "leaky_relu", lambda g: (g * scale,))


def clamp(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip into ``[lo, hi]``; gradient 1 on the closed interval, 0 outside."""
    x = a.data
    inside = np.ones_like(x, dtype=bool)
    if lo is not None:
        inside &= x >= lo
    if hi is not None:
        inside &= x <= hi
    out = np.clip(x, lo, hi)
    mask = inside.astype(np.float64)
    return _make(out, (a,), "clamp", lambda g: (g * mask,))


# ---------------------------------------------------------------------- reductions
def _axis(a: Tensor, axis: int) -> int:
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {list(a.shape)}")
    return axis % a.ndim


def tsum(a: Tensor, axis: int | None = None) -> Tensor:
    """Sum all entries (shape ``[1]``) or along ``axis`` keeping that axis as size 1."""
    if axis is None:
        return _make(np.array([a.data.sum()]), (a,), "sum", lambda g: (np.full(a.shape, g[0]),))
    ax = _axis(a, axis)
    out = a.data.sum(axis=ax, keepdims=True)
    return _make(out, (a,), "sum", lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.size if axis is None else a.shape[_axis(a, axis)]
    return scalar_mul(tsum(a, axis), 1.0 / n)


# ---------------------------------------------------------------------- structure
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D product, or batched product over identical leading dimensions."""
    a, b = as_tensor(a), as_tensor(b)
    ok = a.ndim == b.ndim and a.ndim >= 2 and a.shape[:-2] == b.shape[:-2] and a.shape[-1] == b.shape[-2]
    if not ok:
        raise DimensionError(f"matmul: cannot multiply shapes {list(a.shape)} and {list(b.shape)}")
    av, bv = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(bv, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(av, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _make(av @ bv, (a, b), "matmul", back)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise DimensionError(f"transpose needs at least 2 dims, got {list(a.shape)}")
    return _make(np.swapaxes(a.data, -1, -2), (a,), "transpose", lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if math.prod(shape) != a.size:
        raise DimensionError(f"reshape: cannot view {list(a.shape)} as {list(shape)}")
    return _make(a.data.reshape(shape), (a,), "reshape", lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0]
    ax = _axis(ref, axis)
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax):
            raise DimensionError(f"concat: shapes {list(ref.shape)} and {list(t.shape)} differ off axis {ax}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])
    out = np.concatenate([t.data for t in tensors], axis=ax)

    def back(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors)))

    return _make(out, tuple(tensors), "concat", back)


def elementwise(op_kind: str, a, b=None, **kw) -> Tensor:
    """Dispatch an elementwise or reduction op by name."""
    binary = {"add": add, "sub": sub, "mul": mul, "div": div}
    unary = {"abs": abs, "log": log, "exp": exp, "sigmoid": sigmoid, "tanh": tanh, "sqrt": sqrt, "square": square}
    if op_kind in binary:
        return binary[op_kind](a, b)
    if op_kind in unary:
        return unary[op_kind](as_tensor(a))
    if op_kind == "scalar_mul":
        return scalar_mul(as_tensor(a), b)
    if op_kind == "leaky_relu":
        return leaky_relu(as_tensor(a), kw.get("slope", LEAKY_SLOPE))
    if op_kind == "mean":
        return mean(as_tensor(a), kw.get("axis"))
    if op_kind == "sum":
        return tsum(as_tensor(a), kw.get("axis"))
    if op_kind == "concat":
        return concat(a, kw.get("axis", -1))
    raise ValueError(f"unknown op kind {op_kind!r}")


# ---------------------------------------------------------------------- gradcheck
@dataclass
class GradcheckReport:
    errors: list[float]
    analytic: list[np.ndarray]
    numeric: list[np.ndarray]
    tol: float
    valid: bool = True

    @property
    def max_error(self) -> float:
        return max(self.errors, default=0.0)

    @property
    def passed(self) -> bool:
        return self.valid and self.max_error < self.tol


def _relative_error(a: np.ndarray, n: np.ndarray) -> float:
    diff = np.max(np.abs(a - n), initial=0.0)
    if diff == 0.0:
        return 0.0
    scale = max(np.max(np.abs(a)), np.max(np.abs(n)), GRAD_FLOOR)
    return float(diff / scale)


def gradcheck(f: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-5, tol: float = 1e-3) -> GradcheckReport:
    """Compare analytic gradients of scalar ``f()`` with central differences.

    The error for each parameter is ``max|analytic - numeric|`` divided by the
    largest gradient magnitude of that parameter, floored at ``GRAD_FLOOR``.
    ``f`` is evaluated twice at the base point; differing values mark the
    check invalid.
    """
    if h <= 0:
        raise ValueError("gradcheck step h must be positive")
    params = list(params)
    for p in params:
        p.grad = None
    out = f()
    if out.size != 1:
        raise ContractError(f"gradcheck: f must return a scalar, got shape {list(out.shape)}")
    base = out.item()
    valid = f().item() == base
    if out.requires_grad:
        out.backward()
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]

    numeric = []
    for p in params:
        num = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        numeric.append(num)
    for p in params:
        p.grad = None
    errors = [_relative_error(a, n) for a, n in zip(analytic, numeric)]
    return GradcheckReport(errors, analytic, numeric, tol, valid)
