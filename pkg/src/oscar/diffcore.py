"""Tape-based reverse-mode automatic differentiation over float64 numpy arrays.

Every primitive records a node holding its parents and a closure mapping the
incoming gradient to one gradient per parent. Nodes carry a monotonically
increasing creation index, so sorting the reachable subgraph by that index in
descending order is a valid reverse topological order (the "tape").
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

_counter = itertools.count()


class ShapeError(ValueError):
    """Raised when a primitive receives incompatible shapes."""


class TapeError(RuntimeError):
    """Raised when backward() cannot run on the given output."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op", "_index")
    # make ndarray (op) Tensor dispatch to the Tensor's reflected operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"
        self._index = next(_counter)

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    # -- operators -----------------------------------------------------
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
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    out._op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- binary elementwise -------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a, b)
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("mul", a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _record("mul", a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("div", a, b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _record("div", out, (a, b), backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _record("matmul", a.data @ b.data, (a, b), backward)


# -- unary elementwise ----------------------------------------------------
def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    p = float(exponent)
    return _record("pow", a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _record("square", a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _record("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _record("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    return _record("softplus", np.logaddexp(0.0, a.data), (a,),
                   lambda g: (g * expit(a.data),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = expit(a.data)
    return _record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only where the input was inside."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _record("clip", np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


# -- reductions and scans ---------------------------------------------------
def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record("sum", out, (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    if count == 0:
        raise ShapeError("mean: empty reduction")
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _record("mean", out, (a,), backward)


def _shift(x: np.ndarray, axis: int, k: int) -> np.ndarray:
    # shift by one along axis, zero-filling the vacated slot (no subtraction, no cancellation)
    out = np.zeros_like(x)
    src = [slice(None)] * x.ndim
    dst = [slice(None)] * x.ndim
    if k > 0:
        src[axis], dst[axis] = slice(None, -1), slice(1, None)
    else:
        src[axis], dst[axis] = slice(1, None), slice(None, -1)
    out[tuple(dst)] = x[tuple(src)]
    return out


def cumsum(a, axis: int = -1, exclusive: bool = False) -> Tensor:
    """Cumulative sum along ``axis``; ``exclusive`` shifts so element i sums j < i.

    The backward pass is the reverse cumulative sum of the incoming gradient,
    O(n) per scan line.
    """
    a = as_tensor(a)
    axis = axis % a.ndim
    out = np.cumsum(a.data, axis=axis)
    if exclusive:
        out = _shift(out, axis, +1)

    def backward(g):
        rev = np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)
        return (_shift(rev, axis, -1) if exclusive else rev,)

    return _record("cumsum", out, (a,), backward)


# -- structural -------------------------------------------------------------
def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def take(a, index) -> Tensor:
    """Slice or fancy-index; gradient scatters back into the selected entries only."""
    a = as_tensor(a)
    try:
        out = a.data[index]
    except IndexError as exc:
        raise ShapeError(f"slice: {exc}") from None

    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros(a.shape)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _record("slice", np.array(out, dtype=np.float64), (a,), backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no inputs")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record("concat", out, ts, backward)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    return concat([expand_dims(t, axis) for t in ts], axis=axis)


def expand_dims(a, axis: int) -> Tensor:
    a = as_tensor(a)
    return reshape(a, np.expand_dims(a.data, axis).shape)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast: cannot broadcast {a.shape} to {shape}") from None
    return _record("broadcast", out, (a,), lambda g: (_unbroadcast(g, a.shape),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from None
    return _record("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else np.argsort(axes)
    return _record("transpose", np.transpose(a.data, axes), (a,),
                   lambda g: (np.transpose(g, inv),))


# -- backward ------------------------------------------------------------------
def tape_of(output: Tensor) -> list[Tensor]:
    """Nodes reachable from ``output`` in reverse topological (tape) order."""
    seen: dict[int, Tensor] = {}
    stack_ = [output]
    while stack_:
        node = stack_.pop()
        if id(node) in seen:
            continue
        seen[id(node)] = node
        stack_.extend(p for p in node._parents if p.requires_grad)
    return sorted(seen.values(), key=lambda n: n._index, reverse=True)


def backward(output: Tensor) -> dict[int, np.ndarray]:
    """Backpropagate from a scalar ``output``.

    Sets ``.grad`` on every reachable leaf that requires grad (overwriting any
    previous value) and returns ``{id(leaf): grad}``.
    """
    if output.size != 1:
        raise TapeError(f"backward: output must be scalar, got shape {output.shape}")
    if not output.requires_grad:
        raise TapeError("backward: output has no recorded tape (no input requires grad)")
    grads: dict[int, np.ndarray] = {id(output): np.ones(output.shape)}
    leaves: dict[int, np.ndarray] = {}
    for node in tape_of(output):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g
            leaves[id(node)] = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.asarray(pg, dtype=np.float64)
    return leaves


def grad(output: Tensor, inputs: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of scalar ``output`` w.r.t. ``inputs`` (zeros when unreachable)."""
    found = backward(output)
    return [found.get(id(t), np.zeros(t.shape)) for t in inputs]


# -- finite-difference checker ------------------------------------------------
@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    worst_index: tuple[int, ...] | None = None
    analytic: np.ndarray | None = field(default=None, repr=False)
    numeric: np.ndarray | None = field(default=None, repr=False)
    message: str = ""


def check_gradient(f: Callable[[Tensor], Tensor], x, eps: float = 1e-6,
                   rel_tol: float = 1e-4, floor: float = 1e-8) -> GradCheckReport:
    """Compare backward() against central differences, coordinate by coordinate.

    Per-entry error is ``|a - n| / max(|a|, |n|, floor * scale)`` where ``scale``
    is the largest gradient magnitude (at least 1), so entries that are tiny
    relative to the whole gradient are judged on an absolute footing.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x0 = np.array(as_tensor(x).data, dtype=np.float64)
    xt = Tensor(x0.copy(), requires_grad=True)
    out = f(xt)
    if not np.all(np.isfinite(out.data)):
        return GradCheckReport(np.inf, False, None, message="non-finite output at x")
    if out.requires_grad:
        analytic = grad(out, [xt])[0]
    else:
        analytic = np.zeros_like(x0)
    numeric = np.zeros_like(x0)
    for idx in np.ndindex(x0.shape):
        xp = x0.copy()
        xp[idx] += eps
        xm = x0.copy()
        xm[idx] -= eps
        fp = float(f(Tensor(xp)).data.reshape(-1)[0])
        fm = float(f(Tensor(xm)).data.reshape(-1)[0])
        numeric[idx] = (fp - fm) / (2.0 * eps)
        if not (np.isfinite(numeric[idx]) and np.isfinite(analytic[idx])):
            return GradCheckReport(np.inf, False, idx, analytic, numeric,
                                   message=f"non-finite gradient at coordinate {idx}")
    scale = max(1.0, float(np.max(np.abs(analytic), initial=0.0)),
                float(np.max(np.abs(numeric), initial=0.0)))
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor * scale)
    rel = np.abs(analytic - numeric) / denom
    worst = np.unravel_index(int(np.argmax(rel)), rel.shape) if rel.size else None
    max_rel = float(rel.max(initial=0.0))
    return GradCheckReport(max_rel, max_rel < rel_tol, worst, analytic, numeric)
