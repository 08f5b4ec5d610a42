"""Reverse-mode automatic differentiation on a define-by-run tape.

Every operation here accepts either plain ``numpy`` arrays or :class:`Tensor`
objects.  With arrays it simply computes the value; as soon as one argument
is a ``Tensor`` the operation is recorded on that tensor's :class:`Tape` so
that :meth:`Tape.backward` can propagate adjoints.  Model code is written once
against these functions and runs both as a fast numpy forward pass and as a
differentiable graph.

Implicit broadcasting is restricted to ``scalar (shape ()) with tensor`` and
equal shapes; anything else must go through :func:`broadcast_to`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

#: Lower clamp applied to the inputs of ``log`` and to denominators of ``div``.
CLAMP_MIN = 1e-300


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(ValueError):
    """A precondition of an operation is violated."""


@dataclass
class _Node:
    parents: tuple[int, ...]
    vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]] | None
    requires_grad: bool


class Tape:
    """Append-only record of the operations of one forward pass."""

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.values: list[np.ndarray] = []
        self.clamp_events = 0

    def _push(self, value, parents=(), vjp=None, requires_grad=True) -> "Tensor":
        self.nodes.append(_Node(tuple(parents), vjp, requires_grad))
        self.values.append(value)
        return Tensor(value, self, len(self.nodes) - 1)

    def variable(self, value) -> "Tensor":
        """A differentiable leaf (a parameter or input we want gradients for)."""
        return self._push(np.array(value, dtype=np.float64), requires_grad=True)

    def constant(self, value) -> "Tensor":
        return self._push(np.asarray(value, dtype=np.float64), requires_grad=False)

    def backward(self, loss: "Tensor") -> "Gradients":
        """Propagate d(loss)/d(node) to every node reachable from ``loss``."""
        if not isinstance(loss, Tensor) or loss.tape is not self:
            raise ContractError("loss must be a Tensor recorded on this tape")
        if loss.value.shape != ():
            raise ContractError(f"loss must be a scalar, got shape {loss.value.shape}")
        adjoints: list[np.ndarray | None] = [None] * len(self.nodes)
        adjoints[loss.index] = np.ones(())
        for idx in range(loss.index, -1, -1):
            g = adjoints[idx]
            node = self.nodes[idx]
            if g is None or node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None or not self.nodes[parent].requires_grad:
                    continue
                if adjoints[parent] is None:
                    adjoints[parent] = np.array(pg, dtype=np.float64)
                else:
                    adjoints[parent] = adjoints[parent] + pg
        return Gradients(self, adjoints)


class Gradients:
    """Adjoint buffers produced by :meth:`Tape.backward`."""

    def __init__(self, tape: Tape, adjoints: list) -> None:
        self._tape = tape
        self._adjoints = adjoints

    def __getitem__(self, tensor: "Tensor") -> np.ndarray:
        g = self._adjoints[tensor.index]
        if g is None:
            return np.zeros_like(tensor.value)
        return g

    def __contains__(self, tensor: "Tensor") -> bool:
        return self._adjoints[tensor.index] is not None


class Tensor:
    """A value recorded on a tape.  Immutable after construction."""

    __slots__ = ("value", "tape", "index")
    __array_ufunc__ = None  # make numpy defer to our reflected operators

    def __init__(self, value: np.ndarray, tape: Tape, index: int) -> None:
        self.value = value
        self.tape = tape
        self.index = index

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, node={self.index})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def sum(self, axis=None):
        return sum(self, axis=axis)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _tape_of(*args) -> Tape | None:
    tape = None
    for a in args:
        if isinstance(a, Tensor):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise ContractError("operands live on different tapes")
    return tape


def _lift(x, tape: Tape) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return tape.constant(x)


def _check_elementwise(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape == b.shape or a.shape == () or b.shape == ():
        return
    raise ShapeError(
        f"elementwise operands must share a shape or one must be a scalar: {a.shape} vs {b.shape}"
    )


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.sum(g)
    return g.reshape(shape)


def _binary(a, b, fn, vjp_factory):
    tape = _tape_of(a, b)
    if tape is None:
        return fn(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))
    a, b = _lift(a, tape), _lift(b, tape)
    _check_elementwise(a.value, b.value)
    out = fn(a.value, b.value)
    return tape._push(out, (a.index, b.index), vjp_factory(a.value, b.value, out))


def add(a, b):
    def vjp(av, bv, out):
        return lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape))

    return _binary(a, b, np.add, vjp)


def sub(a, b):
    def vjp(av, bv, out):
        return lambda g: (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape))

    return _binary(a, b, np.subtract, vjp)


def mul(a, b):
    def vjp(av, bv, out):
        return lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape))

    return _binary(a, b, np.multiply, vjp)


def _safe_denominator(b: np.ndarray) -> tuple[np.ndarray, int]:
    small = np.abs(b) < CLAMP_MIN
    n = int(np.count_nonzero(small))
    if n:
        b = np.where(small, np.where(b < 0, -CLAMP_MIN, CLAMP_MIN), b)
    return b, n


def div(a, b):
    tape = _tape_of(a, b)
    if tape is None:
        bv, _ = _safe_denominator(np.asarray(b, dtype=np.float64))
        return np.asarray(a, dtype=np.float64) / bv
    a, b = _lift(a, tape), _lift(b, tape)
    _check_elementwise(a.value, b.value)
    bv, n = _safe_denominator(b.value)
    tape.clamp_events += n
    av = a.value
    out = av / bv
    return tape._push(
        out,
        (a.index, b.index),
        lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)),
    )


def _unary(x, fn, vjp_factory):
    if not isinstance(x, Tensor):
        return fn(np.asarray(x, dtype=np.float64))
    out = fn(x.value)
    return x.tape._push(out, (x.index,), vjp_factory(x.value, out))


def neg(x):
    return _unary(x, np.negative, lambda xv, out: lambda g: (-g,))


def tanh(x):
    return _unary(x, np.tanh, lambda xv, out: lambda g: (g * (1.0 - out * out),))


def exp(x):
    return _unary(x, np.exp, lambda xv, out: lambda g: (g * out,))


def sigmoid(x):
    return _unary(x, expit, lambda xv, out: lambda g: (g * out * (1.0 - out),))


def log(x):
    """Natural log; inputs below ``CLAMP_MIN`` are clamped and counted on the tape."""
    if not isinstance(x, Tensor):
        return np.log(np.maximum(np.asarray(x, dtype=np.float64), CLAMP_MIN))
    low = x.value < CLAMP_MIN
    x.tape.clamp_events += int(np.count_nonzero(low))
    xv = np.maximum(x.value, CLAMP_MIN)
    return x.tape._push(np.log(xv), (x.index,), lambda g: (np.where(low, 0.0, g / xv),))


def square(x):
    return _unary(x, np.square, lambda xv, out: lambda g: (2.0 * g * xv,))


def clip(x, lo: float, hi: float):
    """Clamp to ``[lo, hi]``; the gradient is zero where the clamp is active."""
    if not isinstance(x, Tensor):
        return np.clip(x, lo, hi)
    inside = (x.value >= lo) & (x.value <= hi)
    return x.tape._push(np.clip(x.value, lo, hi), (x.index,), lambda g: (np.where(inside, g, 0.0),))


def stop_gradient(x):
    """Identity in the forward pass; blocks all adjoint flow in the backward pass."""
    if not isinstance(x, Tensor):
        return np.asarray(x, dtype=np.float64)
    return x.tape._push(x.value, (x.index,), lambda g: (np.zeros_like(g),))


def matmul(a, b):
    tape = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    if av.ndim not in (1, 2) or bv.ndim not in (1, 2):
        raise ShapeError("matmul supports vectors and matrices only")
    if av.shape[-1] != bv.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {av.shape} @ {bv.shape}")
    out = av @ bv
    if tape is None:
        return out
    a, b = _lift(a, tape), _lift(b, tape)

    def vjp(g):
        a2 = av if av.ndim == 2 else av[None, :]
        b2 = bv if bv.ndim == 2 else bv[:, None]
        g2 = g.reshape(a2.shape[0], b2.shape[1])
        return (g2 @ b2.T).reshape(av.shape), (a2.T @ g2).reshape(bv.shape)

    return tape._push(out, (a.index, b.index), vjp)


def transpose(x):
    return _unary(x, np.transpose, lambda xv, out: lambda g: (g.T,))


def sum(x, axis=None):  # noqa: A001 - mirrors numpy naming
    if not isinstance(x, Tensor):
        return np.sum(x, axis=axis)
    shape = x.value.shape
    out = np.sum(x.value, axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return x.tape._push(np.asarray(out), (x.index,), vjp)


def mean(x, axis=None):
    n = value_of(x).size if axis is None else value_of(x).shape[axis]
    return sum(x, axis=axis) * (1.0 / n)


def broadcast_to(x, shape: Sequence[int]):
    """Explicit numpy-style broadcast.  The backward pass sums over the broadcast axes."""
    shape = tuple(shape)
    if not isinstance(x, Tensor):
        return np.broadcast_to(np.asarray(x, dtype=np.float64), shape)
    src = x.value.shape
    out = np.broadcast_to(x.value, shape)
    lead = len(shape) - len(src)
    expanded = tuple(i + lead for i, s in enumerate(src) if s == 1 and shape[i + lead] != 1)

    def vjp(g):
        g = np.sum(g, axis=tuple(range(lead))) if lead else g
        if expanded:
            g = np.sum(g, axis=tuple(i - lead for i in expanded), keepdims=True)
        return (g.reshape(src),)

    return x.tape._push(out, (x.index,), vjp)


def reshape(x, shape: Sequence[int]):
    return _unary(x, lambda v: np.reshape(v, shape), lambda xv, out: lambda g: (g.reshape(xv.shape),))


def grad_check(fn: Callable, params: Sequence[np.ndarray], step: float = 1e-5) -> float:
    """Largest relative disagreement between tape gradients and central differences.

    ``fn`` receives one argument per entry of ``params`` and must return a
    scalar; it is called once with tape variables and ``2 * size`` times with
    perturbed plain arrays.  The error for each coordinate is
    ``|autodiff - fd| / max(1, |fd|)``.
    """
    if step <= 0:
        raise ContractError("step must be positive")
    params = [np.array(p, dtype=np.float64) for p in params]
    tape = Tape()
    leaves = [tape.variable(p) for p in params]
    out = fn(*leaves)
    if not isinstance(out, Tensor):
        auto = [np.zeros_like(p) for p in params]
    else:
        grads = tape.backward(out)
        auto = [grads[leaf] for leaf in leaves]
    worst = 0.0
    for k, p in enumerate(params):
        flat = p.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            f_plus = float(value_of(fn(*params)))
            flat[j] = orig - step
            f_minus = float(value_of(fn(*params)))
            flat[j] = orig
            fd = (f_plus - f_minus) / (2.0 * step)
            err = abs(auto[k].reshape(-1)[j] - fd) / max(1.0, abs(fd))
            worst = max(worst, err)
    return worst
