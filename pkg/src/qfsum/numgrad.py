"""Dense float64 arrays with tape-based reverse-mode differentiation.

Operations run eagerly on numpy arrays. When a :class:`Tape` is active on the
current thread and at least one operand requires a gradient, the operation is
appended to the tape together with a closure computing its local
vector-Jacobian product. :meth:`Tape.backward` walks the tape once in reverse
insertion order.

Example:
    >>> w = DiffArray([1.0, 2.0, 3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = total(w)
    >>> tape.backward(loss)
    >>> w.grad
    array([1., 1., 1.])
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "DiffArray",
    "DimensionError",
    "NumericDomainError",
    "Tape",
    "GradCheckReport",
    "backward",
    "custom_op",
    "Scatter",
    "matmul",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "sigmoid",
    "tanh",
    "oneminus",
    "exp",
    "log",
    "log_sigmoid",
    "elementwise",
    "concat",
    "stack",
    "softmax",
    "log_softmax",
    "total",
    "take",
    "gather_rows",
    "repeat_rows",
    "transpose",
    "grad_check",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NumericDomainError(ValueError):
    """An input lies outside the domain of a function (e.g. log of <= 0)."""


_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class DiffArray:
    """A float64 array that can take part in gradient computation.

    Leaves created with ``requires_grad=True`` carry a zero-initialised
    ``grad`` buffer that ``backward`` accumulates into. Arrays produced by
    recorded operations get a fresh ``grad`` on every backward pass.
    """

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_vjp", "_tape")

    # keep numpy from hijacking reflected operators
    __array_priority__ = 1000

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.array(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.values) if requires_grad else None
        self._parents: tuple = ()
        self._vjp = None
        self._tape = None

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def tape_id(self) -> int | None:
        """Position of this array on its tape, or None for leaves/constants."""
        if self._tape is None:
            return None
        return self._tape.index_of(self)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.values)

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.values.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.values

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"DiffArray({self.values!r}{flag})"

    def __len__(self) -> int:
        return len(self.values)

    def __add__(self, other):
        return add(self, _lift(other, self.shape))

    def __radd__(self, other):
        return add(_lift(other, self.shape), self)

    def __sub__(self, other):
        return sub(self, _lift(other, self.shape))

    def __rsub__(self, other):
        return sub(_lift(other, self.shape), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _lift(other, self.shape))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)


def _lift(x, shape) -> DiffArray:
    if isinstance(x, DiffArray):
        return x
    return DiffArray(np.broadcast_to(np.asarray(x, dtype=np.float64), shape))


def _as_diff(x) -> DiffArray:
    return x if isinstance(x, DiffArray) else DiffArray(x)


class Tape:
    """Append-only record of differentiable operations.

    Use as a context manager; operations executed inside the ``with`` block
    on gradient-tracked operands are recorded. Tapes are confined to the
    thread that entered them.
    """

    def __init__(self):
        self.nodes: list[DiffArray] = []
        self._index: dict[int, int] = {}

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def index_of(self, arr: DiffArray) -> int:
        return self._index[id(arr)]

    def _append(self, arr: DiffArray) -> None:
        self._index[id(arr)] = len(self.nodes)
        self.nodes.append(arr)
        arr._tape = self

    def backward(self, loss: DiffArray) -> None:
        """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``."""
        if loss.values.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ValueError("loss was not recorded on this tape")
        for node in self.nodes:
            node.grad = None
        loss.grad = np.ones_like(loss.values)
        for node in reversed(self.nodes):
            g = node.grad
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if isinstance(pg, Scatter):
                    if parent.grad is None:
                        parent.grad = np.zeros_like(parent.values)
                    if isinstance(pg.key, np.ndarray):
                        np.add.at(parent.grad, pg.key, pg.values)
                    else:
                        parent.grad[pg.key] += pg.values
                elif parent.grad is None:
                    parent.grad = np.array(pg, dtype=np.float64)
                else:
                    parent.grad += pg


class Scatter:
    """Sparse gradient contribution: ``values`` added at ``key`` of the parent."""

    __slots__ = ("key", "values")

    def __init__(self, key, values):
        self.key = key
        self.values = values


def backward(loss: DiffArray) -> None:
    """Run reverse accumulation from ``loss`` on the tape that recorded it."""
    if loss._tape is None:
        raise ValueError("loss is not on a tape; compute it inside `with Tape():`")
    loss._tape.backward(loss)


def custom_op(values, parents: Sequence[DiffArray], vjp: Callable) -> DiffArray:
    """Wrap ``values`` as the output of an operation on ``parents``.

    ``vjp(g)`` must return one gradient (or None) per parent. Every built-in
    operation goes through here.
    """
    out = DiffArray.__new__(DiffArray)
    out.values = values
    out.grad = None
    out._parents = ()
    out._vjp = None
    out._tape = None
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
        tape._append(out)
    else:
        out.requires_grad = False
    return out


def _check_same(op: str, a: DiffArray, b: DiffArray) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def matmul(a: DiffArray, b: DiffArray) -> DiffArray:
    """Matrix product for 1-D/2-D operands, following numpy's ``@`` rules."""
    a, b = _as_diff(a), _as_diff(b)
    if a.values.ndim not in (1, 2) or b.values.ndim not in (1, 2):
        raise DimensionError(f"matmul: need 1-D or 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions differ for {a.shape} @ {b.shape}")
    av, bv = a.values, b.values

    def vjp(g):
        g2 = g.reshape(av.shape[0] if av.ndim == 2 else 1, bv.shape[1] if bv.ndim == 2 else 1)
        a2 = av if av.ndim == 2 else av[None, :]
        b2 = bv if bv.ndim == 2 else bv[:, None]
        ga = (g2 @ b2.T).reshape(av.shape) if a.requires_grad else None
        gb = (a2.T @ g2).reshape(bv.shape) if b.requires_grad else None
        return ga, gb

    return custom_op(av @ bv, (a, b), vjp)


def add(a: DiffArray, b: DiffArray) -> DiffArray:
    _check_same("add", a, b)
    return custom_op(a.values + b.values, (a, b), lambda g: (g, g))


def sub(a: DiffArray, b: DiffArray) -> DiffArray:
    _check_same("sub", a, b)
    return custom_op(a.values - b.values, (a, b), lambda g: (g, -g))


def mul(a: DiffArray, b: DiffArray) -> DiffArray:
    _check_same("mul", a, b)
    av, bv = a.values, b.values
    return custom_op(av * bv, (a, b), lambda g: (g * bv, g * av))


def neg(a: DiffArray) -> DiffArray:
    return custom_op(-a.values, (a,), lambda g: (-g,))


def scale(a: DiffArray, c: float) -> DiffArray:
    return custom_op(a.values * c, (a,), lambda g: (g * c,))


def sigmoid(a: DiffArray) -> DiffArray:
    x = a.values
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return custom_op(s, (a,), lambda g: (g * s * (1.0 - s),))


def log_sigmoid(a: DiffArray) -> DiffArray:
    """log(sigmoid(a)) without underflow; log(1 - sigmoid(a)) is log_sigmoid(-a)."""
    x = a.values
    out = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    e = np.exp(-np.abs(x))
    # d/dx log sigma(x) = 1 - sigma(x)
    one_minus_s = np.where(x >= 0, e / (1.0 + e), 1.0 / (1.0 + e))
    return custom_op(out, (a,), lambda g: (g * one_minus_s,))


def tanh(a: DiffArray) -> DiffArray:
    t = np.tanh(a.values)
    return custom_op(t, (a,), lambda g: (g * (1.0 - t * t),))


def oneminus(a: DiffArray) -> DiffArray:
    return custom_op(1.0 - a.values, (a,), lambda g: (-g,))


def exp(a: DiffArray) -> DiffArray:
    e = np.exp(a.values)
    return custom_op(e, (a,), lambda g: (g * e,))


def log(a: DiffArray) -> DiffArray:
    x = a.values
    if np.any(~(x > 0)):
        raise NumericDomainError("log: input must be strictly positive")
    return custom_op(np.log(x), (a,), lambda g: (g / x,))


_UNARY = {
    "sigmoid": sigmoid,
    "tanh": tanh,
    "oneminus": oneminus,
    "exp": exp,
    "log": log,
    "neg": neg,
    "log_sigmoid": log_sigmoid,
}
_BINARY = {"add": add, "mul": mul, "sub": sub}


def elementwise(op: str, *args: DiffArray) -> DiffArray:
    """Dispatch a pointwise operation by name."""
    if op in _UNARY:
        if len(args) != 1:
            raise TypeError(f"{op} takes one operand, got {len(args)}")
        return _UNARY[op](args[0])
    if op in _BINARY:
        if len(args) != 2:
            raise TypeError(f"{op} takes two operands, got {len(args)}")
        return _BINARY[op](args[0], args[1])
    raise ValueError(f"unknown elementwise op {op!r}")


def concat(parts: Sequence[DiffArray], axis: int = 0) -> DiffArray:
    parts = [_as_diff(p) for p in parts]
    if not parts:
        raise DimensionError("concat: no parts")
    vals = [p.values for p in parts]
    ndim = vals[0].ndim
    ax = axis % ndim
    for v in vals[1:]:
        if v.ndim != ndim or v.shape[:ax] + v.shape[ax + 1:] != vals[0].shape[:ax] + vals[0].shape[ax + 1:]:
            raise DimensionError(f"concat: incompatible shapes {[p.shape for p in parts]} on axis {axis}")
    bounds = np.cumsum([0] + [v.shape[ax] for v in vals])

    def vjp(g):
        out = []
        for i in range(len(vals)):
            index = [slice(None)] * ndim
            index[ax] = slice(bounds[i], bounds[i + 1])
            out.append(g[tuple(index)])
        return out

    return custom_op(np.concatenate(vals, axis=ax), parts, vjp)


def stack(parts: Sequence[DiffArray]) -> DiffArray:
    """Stack equal-shape arrays along a new leading axis."""
    parts = [_as_diff(p) for p in parts]
    if not parts:
        raise DimensionError("stack: no parts")
    shape = parts[0].shape
    if any(p.shape != shape for p in parts):
        raise DimensionError(f"stack: shapes differ {[p.shape for p in parts]}")
    return custom_op(np.stack([p.values for p in parts]), parts, lambda g: list(g))


def _check_finite(name: str, x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"{name}: input contains NaN or Inf")


def softmax(a: DiffArray) -> DiffArray:
    """Softmax over the last axis, computed after subtracting the max."""
    x = a.values
    if x.size == 0:
        raise DimensionError("softmax: empty input")
    _check_finite("softmax", x)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return custom_op(p, (a,), vjp)


def log_softmax(a: DiffArray) -> DiffArray:
    x = a.values
    if x.size == 0:
        raise DimensionError("log_softmax: empty input")
    _check_finite("log_softmax", x)
    shifted = x - x.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    p = np.exp(out)

    def vjp(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return custom_op(out, (a,), vjp)


def total(a: DiffArray) -> DiffArray:
    """Sum of all entries as a 0-d array."""
    shape = a.shape
    return custom_op(np.asarray(a.values.sum()), (a,), lambda g: (np.broadcast_to(g, shape),))


def take(a: DiffArray, key) -> DiffArray:
    """Basic indexing/slicing; the gradient is scattered back to ``key``."""
    if isinstance(key, list):
        key = np.asarray(key, dtype=np.intp)
    out = a.values[key]
    return custom_op(np.array(out, dtype=np.float64), (a,), lambda g: (Scatter(key, g),))


def gather_rows(table: DiffArray, ids: Sequence[int]) -> DiffArray:
    """Select rows ``ids`` of a 2-D table (embedding lookup)."""
    ids = np.asarray(ids, dtype=np.intp)
    if table.values.ndim != 2:
        raise DimensionError(f"gather_rows: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"gather_rows: ids out of range for {table.shape[0]} rows")
    return custom_op(table.values[ids], (table,), lambda g: (Scatter(ids, g),))


def repeat_rows(v: DiffArray, n: int) -> DiffArray:
    """Tile a 1-D vector into an (n, len(v)) matrix."""
    if v.values.ndim != 1:
        raise DimensionError(f"repeat_rows: need a vector, got {v.shape}")
    return custom_op(np.tile(v.values, (n, 1)), (v,), lambda g: (g.sum(axis=0),))


def transpose(a: DiffArray) -> DiffArray:
    return custom_op(a.values.T.copy(), (a,), lambda g: (g.T,))


@dataclass
class GradCheckReport:
    """Outcome of comparing tape gradients with central differences."""

    max_rel_error: dict[str, float] = field(default_factory=dict)
    tol: float = 1e-4
    eps: float = 1e-5

    @property
    def passed(self) -> bool:
        return all(err < self.tol for err in self.max_rel_error.values())

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def failures(self) -> list[str]:
        return [name for name, err in self.max_rel_error.items() if not err < self.tol]


def grad_check(
    f: Callable[[], DiffArray],
    params: dict[str, DiffArray] | Iterable[tuple[str, DiffArray]],
    eps: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-8,
) -> GradCheckReport:
    """Compare ``backward`` gradients of ``f()`` against central differences.

    Relative error per entry is ``|a - n| / max(|a|, |n|, floor)``; the
    report keeps the maximum per parameter.
    """
    if not 0 < eps <= 1e-3:
        raise ValueError("eps must lie in (0, 1e-3]")
    named = list(params.items()) if isinstance(params, dict) else list(params)
    for _, p in named:
        p.zero_grad()
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    report = GradCheckReport(tol=tol, eps=eps)
    for name, p in named:
        analytic = p.grad.copy()
        flat = p.values.reshape(-1)
        numeric = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            plus = float(f().values)
            flat[i] = orig - eps
            minus = float(f().values)
            flat[i] = orig
            numeric[i] = (plus - minus) / (2 * eps)
        a = analytic.reshape(-1)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor)
        report.max_rel_error[name] = float(np.max(np.abs(a - numeric) / denom)) if a.size else 0.0
    for _, p in named:
        p.zero_grad()
    return report
