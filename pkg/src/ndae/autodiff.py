"""Tape-based reverse-mode automatic differentiation over dense float64 arrays.

Every elementary operation whose operands depend on a parameter appends
one node to the tape, holding its operands and a closure mapping the
output adjoint to operand adjoints. ``Tape.backward`` walks the node list
in reverse and accumulates adjoints into the registered parameters.
Operations on constants only are evaluated eagerly and never recorded.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "DomainError",
    "Tape",
    "Value",
    "GradCheckReport",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "sqrt",
    "sin",
    "exp",
    "affine",
    "scale_shift",
    "sigmoid",
    "relu",
    "vsum",
    "mean",
    "square_norm",
    "stack",
    "concat",
    "index",
    "axpy",
    "gradient_check",
]


class DomainError(ValueError):
    """An elementary operation was evaluated outside its domain."""


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


class Value:
    """A node (or leaf) of the computation graph."""

    __slots__ = ("data", "grad", "tape", "parents", "vjp", "requires_grad", "adj", "name")
    # make numpy defer to the reflected operators below
    __array_ufunc__ = None

    def __init__(self, data, tape: "Tape | None" = None, parents=(), vjp=None,
                 requires_grad: bool = False, name: str | None = None):
        self.data = data if type(data) is np.ndarray else np.asarray(data, dtype=np.float64)
        self.grad = None
        self.tape = tape
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = requires_grad
        self.adj = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        kind = f"param {self.name}" if self.name else "value"
        return f"Value({kind}, data={self.data!r})"

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

    def __getitem__(self, key):
        return index(self, key)


class Tape:
    """Ordered record of elementary operations plus a parameter registry.

    The graph is rebuilt for every forward pass; :meth:`reset` drops the
    recorded nodes. Parameter adjoints (``.grad``) accumulate across
    :meth:`backward` calls until :meth:`zero_grad`.
    """

    def __init__(self):
        self.nodes: list[Value] = []
        self.parameters: list[Value] = []
        # callbacks run after the reverse sweep, before adjoints reach .grad;
        # fused ops use them to batch per-node parameter contributions
        self.finalizers: dict = {}

    def parameter(self, data, name: str = "param") -> Value:
        arr = np.array(data, dtype=np.float64)
        p = Value(arr, self, requires_grad=True, name=name)
        p.grad = np.zeros_like(arr)
        self.parameters.append(p)
        return p

    def constant(self, data) -> Value:
        return Value(np.array(data, dtype=np.float64), self)

    def reset(self) -> None:
        self.nodes.clear()
        self.finalizers.clear()

    def zero_grad(self) -> None:
        for p in self.parameters:
            p.grad = np.zeros_like(p.data)

    def backward(self, loss: Value) -> None:
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        if not loss.requires_grad:
            return
        for p in self.parameters:
            p.adj = None
        for node in self.nodes:
            node.adj = None
        loss.adj = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            g = node.adj
            if g is None:
                continue
            node.adj = None
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is not None and parent.requires_grad:
                    if parent.adj is None:
                        parent.adj = pg
                    else:
                        parent.adj = parent.adj + pg
        for finalize in self.finalizers.values():
            finalize()
        for p in self.parameters:
            if p.adj is not None:
                p.grad = p.grad + p.adj
                p.adj = None


def _val(x) -> Value:
    return x if type(x) is Value else Value(x)


def _node(data, parents: tuple, vjp: Callable) -> Value:
    tape = None
    for p in parents:
        if p.requires_grad:
            tape = p.tape
            break
    out = Value(data, tape, parents, vjp, True)
    if tape is not None:
        tape.nodes.append(out)
    return out


def deferred_node(tape: Tape, data, parents: tuple, vjp: Callable) -> Value:
    """Record a node whose parameter adjoints are delivered by a tape finalizer.

    ``parents`` lists only the non-parameter inputs; ``vjp`` returns one
    entry per parent.
    """
    out = Value(data, tape, parents, vjp, True)
    tape.nodes.append(out)
    return out


def _conform(op: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.ndim == 0 or b.ndim == 0:
        return
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: operand shapes {a.shape} and {b.shape} do not conform") from None


def add(a, b) -> Value:
    a, b = _val(a), _val(b)
    sa, sb = a.data.shape, b.data.shape
    if sa != sb:
        _conform("add", a.data, b.data)
    out = a.data + b.data
    if not (a.requires_grad or b.requires_grad):
        return Value(out)
    if sa == sb:
        return _node(out, (a, b), lambda g: (g, g))
    return _node(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Value:
    a, b = _val(a), _val(b)
    sa, sb = a.data.shape, b.data.shape
    if sa != sb:
        _conform("sub", a.data, b.data)
    out = a.data - b.data
    if not (a.requires_grad or b.requires_grad):
        return Value(out)
    if sa == sb:
        return _node(out, (a, b), lambda g: (g, -g))
    return _node(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Value:
    a, b = _val(a), _val(b)
    ad, bd = a.data, b.data
    if ad.shape != bd.shape:
        _conform("mul", ad, bd)
    out = ad * bd
    if not (a.requires_grad or b.requires_grad):
        return Value(out)
    need_a, need_b = a.requires_grad, b.requires_grad

    def vjp(g):
        return (_unbroadcast(g * bd, ad.shape) if need_a else None,
                _unbroadcast(g * ad, bd.shape) if need_b else None)

    return _node(out, (a, b), vjp)


def axpy(alpha: float, x, y) -> Value:
    """``alpha * x + y`` for a constant scalar ``alpha`` (one tape node)."""
    x, y = _val(x), _val(y)
    xd, yd = x.data, y.data
    if xd.shape != yd.shape:
        raise ValueError(f"axpy: operand shapes {xd.shape} and {yd.shape} differ")
    out = alpha * xd + yd
    if not (x.requires_grad or y.requires_grad):
        return Value(out)
    return _node(out, (x, y), lambda g: (alpha * g, g))


def div(a, b) -> Value:
    a, b = _val(a), _val(b)
    ad, bd = a.data, b.data
    if ad.shape != bd.shape:
        _conform("div", ad, bd)
    if not bd.all():
        raise DomainError(f"div: division by zero (denominator {bd!r})")
    out = ad / bd
    if not (a.requires_grad or b.requires_grad):
        return Value(out)
    need_a, need_b = a.requires_grad, b.requires_grad

    def vjp(g):
        ga = g / bd
        return (_unbroadcast(ga, ad.shape) if need_a else None,
                _unbroadcast(-ga * out, bd.shape) if need_b else None)

    return _node(out, (a, b), vjp)


def neg(a) -> Value:
    a = _val(a)
    if not a.requires_grad:
        return Value(-a.data)
    return _node(-a.data, (a,), lambda g: (-g,))


def sqrt(a) -> Value:
    a = _val(a)
    if (a.data < 0.0).any():
        raise DomainError(f"sqrt: negative operand {a.data!r}")
    out = np.sqrt(a.data)
    if not a.requires_grad:
        return Value(out)

    def vjp(g):
        if not out.all():
            raise DomainError("sqrt: derivative unbounded at operand 0")
        return (g * 0.5 / out,)

    return _node(out, (a,), vjp)


def sin(a) -> Value:
    a = _val(a)
    d = a.data
    if not a.requires_grad:
        return Value(np.sin(d))
    return _node(np.sin(d), (a,), lambda g: (g * np.cos(d),))


def exp(a) -> Value:
    a = _val(a)
    out = np.exp(a.data)
    if not a.requires_grad:
        return Value(out)
    return _node(out, (a,), lambda g: (g * out,))


def sigmoid(a) -> Value:
    a = _val(a)
    out = expit(a.data)
    if not a.requires_grad:
        return Value(out)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a) -> Value:
    """Rectifier; the derivative at exactly 0 is taken as 0."""
    a = _val(a)
    mask = a.data > 0.0
    out = a.data * mask
    if not a.requires_grad:
        return Value(out)
    return _node(out, (a,), lambda g: (g * mask,))


def affine(W, x, b) -> Value:
    """``W @ x + b`` for a matrix ``W`` and vector ``x``."""
    W, x, b = _val(W), _val(x), _val(b)
    Wd, xd = W.data, x.data
    if Wd.ndim != 2 or xd.ndim != 1 or Wd.shape[1] != xd.shape[0] or b.data.shape != (Wd.shape[0],):
        raise ValueError(
            f"affine: shapes W{Wd.shape}, x{xd.shape}, b{b.data.shape} do not conform")
    out = Wd @ xd + b.data
    if not (W.requires_grad or x.requires_grad or b.requires_grad):
        return Value(out)
    need_W, need_x = W.requires_grad, x.requires_grad

    def vjp(g):
        return (g[:, None] * xd if need_W else None, Wd.T @ g if need_x else None, g)

    return _node(out, (W, x, b), vjp)


def scale_shift(x, scale: np.ndarray, shift: np.ndarray) -> Value:
    """``x * scale + shift`` with constant ``scale`` and ``shift``."""
    x = _val(x)
    out = x.data * scale + shift
    if not x.requires_grad:
        return Value(out)
    shape = x.data.shape
    return _node(out, (x,), lambda g: (_unbroadcast(g * scale, shape),))


def vsum(a) -> Value:
    a = _val(a)
    shape = a.data.shape
    out = np.sum(a.data)
    if not a.requires_grad:
        return Value(out)
    return _node(out, (a,), lambda g: (np.full(shape, g),))


def mean(a) -> Value:
    a = _val(a)
    shape, n = a.data.shape, a.data.size
    out = np.mean(a.data)
    if not a.requires_grad:
        return Value(out)
    return _node(out, (a,), lambda g: (np.full(shape, g / n),))


def square_norm(a) -> Value:
    """Sum of squared entries."""
    a = _val(a)
    d = a.data
    flat = d.ravel()
    out = np.dot(flat, flat)
    if not a.requires_grad:
        return Value(out)
    return _node(out, (a,), lambda g: (2.0 * g * d,))


def stack(values: Sequence) -> Value:
    """Stack equally shaped values along a new leading axis."""
    vals = tuple(_val(v) for v in values)
    shape = vals[0].data.shape
    for v in vals:
        if v.data.shape != shape:
            raise ValueError(f"stack: shapes {shape} and {v.data.shape} differ")
    if shape == ():
        data = np.array([v.data for v in vals], dtype=np.float64)
    else:
        data = np.stack([v.data for v in vals])
    if not any(v.requires_grad for v in vals):
        return Value(data)
    return _node(data, vals, lambda g: tuple(g))


def concat(values: Sequence) -> Value:
    """Concatenate 1-d (or 0-d) values into one vector."""
    vals = tuple(_val(v) for v in values)
    parts = [v.data.reshape(-1) if v.data.ndim == 0 else v.data for v in vals]
    data = np.concatenate(parts)
    if not any(v.requires_grad for v in vals):
        return Value(data)
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])
    shapes = [v.data.shape for v in vals]

    def vjp(g):
        return tuple(g[bounds[i]:bounds[i + 1]].reshape(shapes[i]) for i in range(len(vals)))

    return _node(data, vals, vjp)


def index(a, key) -> Value:
    a = _val(a)
    out = a.data[key]
    if not a.requires_grad:
        return Value(out)
    shape = a.data.shape

    def vjp(g):
        full = np.zeros(shape)
        full[key] = g
        return (full,)

    return _node(out, (a,), vjp)


@dataclass
class GradCheckReport:
    """Relative errors of tape gradients against central differences.

    ``per_parameter[i]`` is ``|a - n| / max(|a|, |n|)`` in the Euclidean norm
    over parameter ``i``'s entries; ``max_rel_error`` and ``mean_rel_error``
    summarize those. ``max_elementwise_error`` is the same ratio taken entry
    by entry, a diagnostic only: for entries many orders below the loss
    scale the difference quotient itself carries roundoff of order
    ``eps * loss / fd_step``.
    """

    max_rel_error: float
    mean_rel_error: float
    per_parameter: list[float]
    analytic: list[np.ndarray]
    numeric: list[np.ndarray]
    max_elementwise_error: float = 0.0

    def passed(self, tolerance: float) -> bool:
        return self.max_rel_error <= tolerance


def gradient_check(loss_fn: Callable[[], Value], params: Iterable[Value],
                   fd_step: float = 1e-6, abs_floor: float = 1e-8) -> GradCheckReport:
    """Compare tape gradients of ``loss_fn()`` with central finite differences.

    ``loss_fn`` must rebuild the forward pass from the current parameter
    data on every call. Entries where both gradients are below
    ``abs_floor`` in magnitude are compared by absolute difference.
    """
    if fd_step <= 0:
        raise ValueError("fd_step must be positive")
    params = list(params)
    tape = params[0].tape if params else None
    saved = [p.grad for p in params]
    for p in params:
        p.grad = np.zeros_like(p.data)
    if tape is not None:
        tape.reset()
    loss = loss_fn()
    if tape is not None:
        tape.backward(loss)
    analytic = [p.grad.copy() for p in params]
    for p, g in zip(params, saved):
        p.grad = g

    numeric = []
    for p in params:
        num = np.zeros(p.data.shape)
        flat = p.data.reshape(-1)
        out = num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + fd_step
            lp = float(loss_fn().data)
            flat[i] = orig - fd_step
            lm = float(loss_fn().data)
            flat[i] = orig
            out[i] = (lp - lm) / (2.0 * fd_step)
            if tape is not None:
                tape.reset()
        numeric.append(num)

    per_param, elementwise = [], 0.0
    for a, n in zip(analytic, numeric):
        per_param.append(_rel_error(np.linalg.norm(a - n), np.linalg.norm(a),
                                    np.linalg.norm(n), abs_floor))
        if a.size:
            err = _rel_error(np.abs(a - n), np.abs(a), np.abs(n), abs_floor)
            elementwise = max(elementwise, float(np.max(err)))
    arr = np.array(per_param) if per_param else np.zeros(1)
    return GradCheckReport(float(arr.max()), float(arr.mean()), per_param, analytic, numeric,
                           elementwise)


def _rel_error(diff, a, n, abs_floor: float):
    # near-zero gradients (both below the floor) are compared absolutely
    scale = np.maximum(a, n)
    return np.where(scale > abs_floor, diff / np.maximum(scale, abs_floor), diff)
