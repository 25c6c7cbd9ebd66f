"""Dense float64 tensors with a define-by-run reverse-mode tape.

A :class:`Tape` is created per forward pass. Leaves are registered with
:meth:`Tape.param` (trainable, named) or :meth:`Tape.const`. Every operation
below appends one node to the tape of its inputs, so node inputs always
precede the node and a reversed walk over ``tape.nodes`` is a valid
topological order for :func:`backward`.

Operations broadcast like numpy where noted; the backward pass reduces
gradients back to each input's shape.
"""
from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

__all__ = [
    "Tensor", "Tape", "affine", "elementwise", "tanh", "sigmoid", "hadamard",
    "concat", "add", "sub", "mul", "div", "exp", "log", "square", "relu",
    "clip", "softmax", "tsum", "mean", "reshape", "gather", "take", "amin",
    "einsum", "cosine_matrix", "detach", "backward", "grad_check",
]


class Tensor:
    """A node on a tape: forward value plus the rule to pull gradients back."""

    __slots__ = ("value", "tape", "id", "parents", "vjp", "op", "name")

    def __init__(self, value, tape, parents=(), vjp=None, op="leaf", name=None):
        self.value = value
        self.tape = tape
        self.parents = parents
        self.vjp = vjp
        self.op = op
        self.name = name
        self.id = len(tape.nodes)
        tape.nodes.append(self)
        if tape.check_finite and not np.all(np.isfinite(value)):
            raise NumericError(f"non-finite value produced by node {self.id} ({op})")

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __repr__(self):
        return f"Tensor(id={self.id}, op={self.op}, shape={self.shape})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, index):
        return take(self, index)


class Tape:
    """Append-only record of one forward pass."""

    def __init__(self, check_finite: bool = False):
        self.nodes: list[Tensor] = []
        self.params: dict[str, Tensor] = {}
        self.check_finite = check_finite

    def param(self, name: str, value) -> Tensor:
        if name in self.params:
            return self.params[name]
        t = Tensor(np.asarray(value, dtype=np.float64), self, name=name)
        self.params[name] = t
        return t

    def params_from(self, values: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
        return {k: self.param(k, v) for k, v in values.items()}

    def const(self, value) -> Tensor:
        return Tensor(np.asarray(value, dtype=np.float64), self, op="const")


def _lift(x, tape: Tape) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return tape.const(x)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Tensor):
            return x.tape
    raise ContractError("operation needs at least one Tensor input")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _binary(a, b, fn, vjp_fn, op):
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    try:
        out = fn(a.value, b.value)
    except ValueError as exc:
        raise DimensionError(f"{op}: cannot combine shapes {a.shape} and {b.shape}") from exc
    return Tensor(out, tape, (a, b), vjp_fn(a.value, b.value, out), op)


def add(a, b) -> Tensor:
    def vjp(x, y, out):
        return lambda g: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape))
    return _binary(a, b, np.add, vjp, "add")


def sub(a, b) -> Tensor:
    def vjp(x, y, out):
        return lambda g: (_unbroadcast(g, x.shape), _unbroadcast(-g, y.shape))
    return _binary(a, b, np.subtract, vjp, "sub")


def mul(a, b) -> Tensor:
    def vjp(x, y, out):
        return lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape))
    return _binary(a, b, np.multiply, vjp, "mul")


def div(a, b) -> Tensor:
    def vjp(x, y, out):
        return lambda g: (_unbroadcast(g / y, x.shape), _unbroadcast(-g * out / y, y.shape))
    return _binary(a, b, np.divide, vjp, "div")


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of two same-shape tensors (no broadcasting)."""
    if a.shape != b.shape:
        raise DimensionError(f"hadamard: shapes differ, {a.shape} vs {b.shape}")
    return mul(a, b)


def _unary(x: Tensor, value, grad_fn, op) -> Tensor:
    return Tensor(value, x.tape, (x,), lambda g: (grad_fn(g),), op)


# largest float below 1 and smallest above 0: keeps saturated outputs open-interval
_BELOW_ONE = np.nextafter(1.0, 0.0)
_ABOVE_ZERO = np.nextafter(0.0, 1.0)


def tanh(x: Tensor) -> Tensor:
    out = np.clip(np.tanh(x.value), -_BELOW_ONE, _BELOW_ONE)
    return _unary(x, out, lambda g: g * (1.0 - out * out), "tanh")


def sigmoid(x: Tensor) -> Tensor:
    v = x.value
    # split by sign so exp never overflows
    e = np.exp(-np.abs(v))
    out = np.clip(np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e)), _ABOVE_ZERO, _BELOW_ONE)
    return _unary(x, out, lambda g: g * out * (1.0 - out), "sigmoid")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.value)
    return _unary(x, out, lambda g: g * out, "exp")


def log(x: Tensor) -> Tensor:
    v = x.value
    return _unary(x, np.log(v), lambda g: g / v, "log")


def square(x: Tensor) -> Tensor:
    v = x.value
    return _unary(x, v * v, lambda g: 2.0 * g * v, "square")


def relu(x: Tensor) -> Tensor:
    v = x.value
    on = (v > 0).astype(np.float64)
    return _unary(x, v * on, lambda g: g * on, "relu")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    v = x.value
    inside = ((v >= lo) & (v <= hi)).astype(np.float64)
    return _unary(x, np.clip(v, lo, hi), lambda g: g * inside, "clip")


def detach(x: Tensor) -> Tensor:
    """Same value, no gradient path."""
    return x.tape.const(x.value.copy())


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    v = x.value
    z = np.exp(v - v.max(axis=axis, keepdims=True))
    out = z / z.sum(axis=axis, keepdims=True)

    def grad(g):
        return out * (g - (g * out).sum(axis=axis, keepdims=True))
    return _unary(x, out, grad, "softmax")


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    out = np.sum(x.value, axis=axis, keepdims=keepdims)

    def grad(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()
    return _unary(x, np.asarray(out, dtype=np.float64), grad, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.value.size if axis is None else x.shape[axis]
    return mul(tsum(x, axis), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _unary(x, x.value.reshape(shape), lambda g: g.reshape(old), "reshape")


def take(x: Tensor, index) -> Tensor:
    """Basic or advanced indexing; repeated indices accumulate gradient."""
    shape = x.shape

    def grad(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return out
    return _unary(x, x.value[index], grad, "index")


def gather(x: Tensor, idx) -> Tensor:
    """Rows of ``x`` selected by an integer array (first axis)."""
    return take(x, np.asarray(idx, dtype=np.intp))


def amin(x: Tensor, axis: int = -1) -> Tensor:
    """Minimum along ``axis``; gradient goes to the first minimizing entry."""
    v = x.value
    arg = np.argmin(v, axis=axis)
    out = np.take_along_axis(v, np.expand_dims(arg, axis), axis).squeeze(axis)

    def grad(g):
        full = np.zeros_like(v)
        np.put_along_axis(full, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis)
        return full
    return _unary(x, out, grad, "amin")


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    tape = _tape_of(*xs)
    xs = [_lift(x, tape) for x in xs]
    try:
        out = np.concatenate([x.value for x in xs], axis=axis)
    except ValueError as exc:
        raise DimensionError(
            "concat: incompatible shapes " + ", ".join(str(x.shape) for x in xs)) from exc
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))
    return Tensor(out, tape, tuple(xs), vjp, "concat")


def affine(W: Tensor, x: Tensor, b: Tensor | None = None) -> Tensor:
    """``W @ x + b`` for ``x`` of shape (..., n) and ``W`` of shape (m, n)."""
    if W.value.ndim != 2 or x.shape[-1] != W.shape[1]:
        raise DimensionError(f"affine: W has shape {W.shape} but x has shape {x.shape}")
    if b is not None and b.shape != (W.shape[0],):
        raise DimensionError(f"affine: W has shape {W.shape} but b has shape {b.shape}")
    w, xv = W.value, x.value
    out = xv @ w.T
    if b is not None:
        out = out + b.value
    m, n = w.shape

    def vjp(g):
        g2 = g.reshape(-1, m)
        grads = [g2.T @ xv.reshape(-1, n), g @ w]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)
    parents = (W, x) if b is None else (W, x, b)
    return Tensor(out, W.tape, parents, vjp, "affine")


def einsum(spec: str, a, b) -> Tensor:
    """Two-operand einsum without ellipsis or repeated indices per operand."""
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    lhs, out_s = spec.replace(" ", "").split("->")
    sa, sb = lhs.split(",")
    try:
        out = np.einsum(spec, a.value, b.value, optimize=False)
    except ValueError as exc:
        raise DimensionError(f"einsum {spec}: shapes {a.shape} and {b.shape}") from exc
    av, bv = a.value, b.value

    def vjp(g):
        ga = _einsum_grad(g, out_s, bv, sb, sa, av.shape)
        gb = _einsum_grad(g, out_s, av, sa, sb, bv.shape)
        return ga, gb
    return Tensor(np.asarray(out, dtype=np.float64), tape, (a, b), vjp, "einsum")


def _einsum_grad(g, sg, other, so, target, shape):
    # indices of the target that appear in neither g nor the other operand
    # were summed out in forward; their gradient is a broadcast
    missing = [c for c in target if c not in sg and c not in so]
    partial = "".join(c for c in target if c not in missing)
    res = np.einsum(f"{sg},{so}->{partial}", g, other, optimize=False)
    if missing:
        expand = [i for i, c in enumerate(target) if c in missing]
        res = np.expand_dims(res, expand)
        res = np.broadcast_to(res, shape).copy()
    return res


def cosine_matrix(V: Tensor) -> Tensor:
    """Pairwise cosine similarity of the rows of ``V`` (shape (I, n)).

    Rows with zero norm have cosine 0 with everything and receive no gradient.
    """
    v = V.value
    norms = np.sqrt((v * v).sum(axis=1))
    safe = np.where(norms > 0, norms, 1.0)
    u = v / safe[:, None]
    u[norms == 0] = 0.0
    out = u @ u.T

    def grad(g):
        gu = (g + g.T) @ u
        radial = (gu * u).sum(axis=1, keepdims=True)
        return (gu - radial * u) / safe[:, None]
    return _unary(V, out, grad, "cosine")


_ELEMENTWISE = {"tanh": tanh, "sigmoid": sigmoid}


def elementwise(kind: str, *args: Tensor) -> Tensor:
    if kind in _ELEMENTWISE:
        if len(args) != 1:
            raise ContractError(f"{kind} takes one argument, got {len(args)}")
        return _ELEMENTWISE[kind](args[0])
    if kind == "hadamard":
        if len(args) != 2:
            raise ContractError("hadamard takes two arguments")
        return hadamard(*args)
    if kind == "concat":
        for a in args:
            if len(a.shape) != 1:
                raise DimensionError(f"concat expects rank-1 tensors, got shape {a.shape}")
        return concat(args, axis=0)
    raise ContractError(f"unknown elementwise kind {kind!r}")


def backward(tape: Tape, loss: Tensor) -> dict[str, np.ndarray]:
    """Gradient of a scalar ``loss`` for every parameter registered on ``tape``.

    Parameters the loss does not reach get an exact zero array.
    """
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: list = [None] * len(tape.nodes)
    grads[loss.id] = np.ones_like(loss.value)
    for node in reversed(tape.nodes[: loss.id + 1]):
        g = grads[node.id]
        if g is None or node.vjp is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None:
                continue
            if grads[parent.id] is None:
                grads[parent.id] = np.array(pg, dtype=np.float64)
            else:
                grads[parent.id] = grads[parent.id] + pg
    out = {}
    for name, t in tape.params.items():
        g = grads[t.id]
        out[name] = np.zeros_like(t.value) if g is None else g.reshape(t.shape)
    return out


def grad_check(
    f: Callable[[Tape, dict[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray],
    eps: float = 1e-5,
) -> float:
    """Largest relative gap between tape gradients and central differences.

    ``f(tape, tensors)`` must build a scalar loss from the parameter tensors.
    The error per coordinate is |a - n| / max(1, |a|, |n|).
    """
    if not 0 < eps <= 1e-2:
        raise ContractError(f"eps must lie in (0, 1e-2], got {eps}")
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def evaluate(values, check=True):
        tape = Tape(check_finite=check)
        loss = f(tape, tape.params_from(values))
        return tape, loss

    def perturbed(values) -> float:
        # cheap pass first; replay with per-node checks to name the culprit
        value = float(evaluate(values, check=False)[1].value)
        if not np.isfinite(value):
            value = float(evaluate(values)[1].value)
        return value

    tape, loss = evaluate(params)
    analytic = backward(tape, loss)
    worst = 0.0
    for name, base in params.items():
        flat = base.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            hi = perturbed(params)
            flat[k] = orig - eps
            lo = perturbed(params)
            flat[k] = orig
            num = (hi - lo) / (2 * eps)
            ana = float(analytic[name].reshape(-1)[k])
            err = abs(ana - num) / max(1.0, abs(ana), abs(num))
            worst = max(worst, err)
    return worst
