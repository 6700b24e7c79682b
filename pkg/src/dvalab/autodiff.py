"""Define-by-run reverse-mode automatic differentiation over float64 arrays.

A :class:`Tape` records every primitive applied to :class:`Var` handles.
Calling :meth:`Tape.backward` on a scalar node walks the record once in
reverse and returns the gradient of every trainable leaf.

Broadcasting follows numpy rules for the elementwise primitives; the
reverse pass sums cotangents back down to each operand's shape.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np


class AutodiffError(Exception):
    """Base class for tape errors."""


class ShapeError(AutodiffError):
    """Operand shapes do not conform."""


class DomainError(AutodiffError):
    """Operand lies outside a primitive's domain (ln of x <= 0, division by 0)."""


class NonFiniteError(AutodiffError):
    """A forward value became NaN or infinite."""


class ContractError(AutodiffError):
    """API misuse, e.g. backward from a non-scalar node."""


def _as_array(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class _Node:
    __slots__ = ("value", "parents", "vjp", "requires_grad", "trainable", "op")

    def __init__(self, value, parents, vjp, requires_grad, trainable, op):
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = requires_grad
        self.trainable = trainable
        self.op = op


class Var:
    """Handle to one node of a tape."""

    __slots__ = ("tape", "index")
    __array_priority__ = 100

    def __init__(self, tape: "Tape", index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.index].value

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __repr__(self):
        node = self.tape.nodes[self.index]
        return f"Var(#{self.index}, op={node.op}, shape={self.shape})"

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

    def __getitem__(self, idx):
        return take(self, idx)


class Tape:
    """Append-only record of primitive operations."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value, trainable: bool = True) -> Var:
        value = _as_array(value).copy()
        if not np.all(np.isfinite(value)):
            raise NonFiniteError("leaf value is not finite")
        self.nodes.append(_Node(value, (), None, trainable, trainable, "leaf"))
        return Var(self, len(self.nodes) - 1)

    def const(self, value) -> Var:
        return self.leaf(value, trainable=False)

    def record(self, value, parents: Sequence[Var], vjp: Callable, op: str) -> Var:
        """Append a node computed from ``parents``.

        ``vjp(g)`` must return one cotangent per parent (``None`` allowed for
        parents that need no gradient).  Custom fused kernels use this hook.
        """
        value = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise NonFiniteError(f"{op} produced a non-finite value")
        for p in parents:
            if p.tape is not self:
                raise ContractError("operands belong to different tapes")
        idx = tuple(p.index for p in parents)
        req = any(self.nodes[i].requires_grad for i in idx)
        self.nodes.append(_Node(value, idx, vjp, req, False, op))
        return Var(self, len(self.nodes) - 1)

    def backward(self, out: Var) -> dict[int, np.ndarray]:
        """Gradients of scalar ``out`` w.r.t. every trainable leaf, keyed by node index."""
        if out.tape is not self:
            raise ContractError("output belongs to a different tape")
        if out.value.size != 1:
            raise ContractError(f"backward needs a scalar output, got shape {out.shape}")
        grads: list = [None] * (out.index + 1)
        grads[out.index] = np.ones_like(out.value)
        nodes = self.nodes
        for i in range(out.index, -1, -1):
            g = grads[i]
            if g is None:
                continue
            node = nodes[i]
            if not node.parents or not node.requires_grad:
                continue
            pgrads = node.vjp(g)
            for pi, pg in zip(node.parents, pgrads):
                if pg is None or not nodes[pi].requires_grad:
                    continue
                if grads[pi] is None:
                    grads[pi] = pg
                else:
                    grads[pi] = grads[pi] + pg
        result = {}
        for i in range(out.index + 1):
            node = nodes[i]
            if node.trainable:
                g = grads[i]
                result[i] = np.zeros_like(node.value) if g is None else np.asarray(g, dtype=np.float64)
        return result

    def gradient(self, out: Var, wrt: Sequence[Var]) -> list[np.ndarray]:
        grads = self.backward(out)
        return [grads[v.index] for v in wrt]


def _lift(tape: Tape, x) -> Var:
    if isinstance(x, Var):
        return x
    return tape.const(x)


def _tape_of(*args) -> Tape:
    for a in args:
        if isinstance(a, Var):
            return a.tape
    raise ContractError("at least one operand must be a Var")


def _broadcast_shape(a: np.ndarray, b: np.ndarray) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"shapes {a.shape} and {b.shape} do not conform") from exc


def add(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    va, vb = a.value, b.value
    _broadcast_shape(va, vb)
    sa, sb = va.shape, vb.shape
    return tape.record(va + vb, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    va, vb = a.value, b.value
    _broadcast_shape(va, vb)
    sa, sb = va.shape, vb.shape
    return tape.record(va - vb, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    va, vb = a.value, b.value
    _broadcast_shape(va, vb)
    return tape.record(
        va * vb,
        (a, b),
        lambda g: (_unbroadcast(g * vb, va.shape), _unbroadcast(g * va, vb.shape)),
        "mul",
    )


def div(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    va, vb = a.value, b.value
    _broadcast_shape(va, vb)
    if np.any(vb == 0.0):
        raise DomainError("division by zero")
    out = va / vb
    return tape.record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / vb, va.shape), _unbroadcast(-g * out / vb, vb.shape)),
        "div",
    )


def neg(a: Var) -> Var:
    return a.tape.record(-a.value, (a,), lambda g: (-g,), "neg")


def square(a: Var) -> Var:
    va = a.value
    return a.tape.record(va * va, (a,), lambda g: (2.0 * g * va,), "square")


def ln(a: Var) -> Var:
    va = a.value
    if np.any(va <= 0.0):
        raise DomainError("ln of a nonpositive value")
    return a.tape.record(np.log(va), (a,), lambda g: (g / va,), "ln")


def exp(a: Var) -> Var:
    with np.errstate(over="ignore"):
        out = np.exp(a.value)
    return a.tape.record(out, (a,), lambda g: (g * out,), "exp")


def tanh(a: Var) -> Var:
    out = np.tanh(a.value)
    return a.tape.record(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def clamp(a: Var, lo: float, hi: float) -> Var:
    """Clip to ``[lo, hi]``; the gradient is zero where clipping is active."""
    va = a.value
    inside = (va >= lo) & (va <= hi)
    return a.tape.record(np.clip(va, lo, hi), (a,), lambda g: (g * inside,), "clamp")


def matvec(w, x) -> Var:
    """``W @ x`` for ``x`` of shape ``(n,)``, or row-wise ``x @ W.T`` for ``x`` of shape ``(B, n)``."""
    tape = _tape_of(w, x)
    w, x = _lift(tape, w), _lift(tape, x)
    vw, vx = w.value, x.value
    if vw.ndim != 2 or vx.ndim not in (1, 2) or vx.shape[-1] != vw.shape[1]:
        raise ShapeError(f"matvec shapes {vw.shape} and {vx.shape} do not conform")
    if vx.ndim == 1:
        return tape.record(vw @ vx, (w, x), lambda g: (np.outer(g, vx), vw.T @ g), "matvec")
    return tape.record(vx @ vw.T, (w, x), lambda g: (g.T @ vx, g @ vw), "matvec")


def sum(a: Var) -> Var:  # noqa: A001 - mirrors the primitive name
    shape = a.value.shape
    return a.tape.record(np.sum(a.value), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(a: Var) -> Var:
    shape = a.value.shape
    n = a.value.size
    return a.tape.record(
        np.sum(a.value) / n, (a,), lambda g: (np.broadcast_to(g / n, shape).copy(),), "mean"
    )


def take(a: Var, idx) -> Var:
    """Gather entries (fancy or basic indexing); the reverse pass scatter-adds."""
    shape = a.value.shape
    out = a.value[idx]

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return a.tape.record(out, (a,), vjp, "take")


def reshape(a: Var, shape) -> Var:
    old = a.value.shape
    return a.tape.record(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def grad_check(
    f: Callable[[list[Var]], Var],
    point: Sequence,
    h: float = 1e-5,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` receives a list of leaf ``Var`` (one per array in ``point``) and must
    return a scalar ``Var``.  The error for each coordinate is
    ``|analytic - numeric| / max(|analytic|, 1e-12)``.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    arrays = [_as_array(p) for p in point]
    tape = Tape()
    leaves = [tape.leaf(a) for a in arrays]
    analytic = tape.gradient(f(leaves), leaves)

    def evaluate(values):
        t = Tape()
        return float(f([t.leaf(v) for v in values]).value)

    worst = 0.0
    for k, base in enumerate(arrays):
        flat = base.ravel()
        for j in range(flat.size):
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[k].ravel()[j] = flat[j] + h
            minus[k].ravel()[j] = flat[j] - h
            numeric = (evaluate(plus) - evaluate(minus)) / (2.0 * h)
            a = analytic[k].ravel()[j]
            err = abs(a - numeric) / max(abs(a), 1e-12)
            worst = max(worst, err)
    return worst


def softplus(a: Var) -> Var:
    # ln(1 + e^x) through the primitive set; stable for the parameter ranges used here
    return ln(add(exp(a), 1.0))


LOG_2PI = math.log(2.0 * math.pi)
