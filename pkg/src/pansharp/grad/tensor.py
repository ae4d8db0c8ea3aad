"""Reverse-mode autodiff over float32 numpy arrays.

A Tensor wraps an ndarray plus an optional gradient buffer. Differentiable
operations run eagerly and, while a Tape is active, append a backward
closure to it. The tape's record order is execution order, which is a
topological order of the graph by construction; ``backward(loss)`` walks it
once in reverse, accumulating gradients into ``.grad`` (grads add up across
calls until explicitly reset).

Each worker owns at most one active tape; nothing here is thread-safe.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

DTYPE = np.float32


class Tape:
    """Ordered record of executed differentiable operations."""

    _stack: list["Tape"] = []

    def __init__(self):
        self._nodes: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack.pop()

    def __len__(self) -> int:
        return len(self._nodes)

    @classmethod
    def active(cls) -> "Tape | None":
        return cls._stack[-1] if cls._stack else None

    def record(self, out: "Tensor", backward_fn: Callable[[np.ndarray], None]) -> None:
        self._nodes.append((out, backward_fn))
        out.requires_grad = True
        out.tape = self

    def run_backward(self, loss: "Tensor") -> None:
        if loss.size != 1:
            raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")
        loss.accumulate_grad(np.ones_like(loss.data))
        # Reverse execution order; every recorded operation is visited once.
        for out, backward_fn in reversed(self._nodes):
            if out.grad is not None:
                backward_fn(out.grad)


class Tensor:
    """float32 array with an optional accumulated gradient."""

    __slots__ = ("data", "grad", "requires_grad", "tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.tape: Tape | None = None

    # -- bookkeeping ------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def sum(self) -> "Tensor":
        return tensor_sum(self)


def _record(out: Tensor, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    tape = Tape.active()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(out, backward_fn)
    return out


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        for axis, (da, db) in enumerate(zip(a.shape, b.shape)):
            if da != db:
                raise ValueError(
                    f"{op}: operands differ along axis {axis} ({da} vs {db}); "
                    f"shapes {a.shape} and {b.shape}"
                )
        raise ValueError(f"{op}: operand ranks differ: {a.shape} vs {b.shape}")


# -- pointwise and reduction operations -----------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    out = Tensor(a.data + b.data)

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g)

    return _record(out, (a, b), backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)
    out = Tensor(a.data * b.data)

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(g * b.data)
        if b.requires_grad:
            b.accumulate_grad(g * a.data)

    return _record(out, (a, b), backward_fn)


def elementwise(a: Tensor, b: Tensor, op: str) -> Tensor:
    """Elementwise combination of two same-shape tensors; op is add|mul."""
    if op == "add":
        return add(a, b)
    if op == "mul":
        return mul(a, b)
    raise ValueError(f"elementwise: unsupported op {op!r} (expected 'add' or 'mul')")


def scale(a: Tensor, s: float) -> Tensor:
    out = Tensor(a.data * DTYPE(s))

    def backward_fn(g: np.ndarray) -> None:
        a.accumulate_grad(g * DTYPE(s))

    return _record(out, (a,), backward_fn)


def tensor_sum(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum(dtype=np.float64))

    def backward_fn(g: np.ndarray) -> None:
        a.accumulate_grad(np.broadcast_to(g, a.shape).astype(DTYPE))

    return _record(out, (a,), backward_fn)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0  # gradient is zero at exactly 0
    out = Tensor(np.where(mask, a.data, 0))

    def backward_fn(g: np.ndarray) -> None:
        a.accumulate_grad(g * mask)

    return _record(out, (a,), backward_fn)


def sigmoid(a: Tensor) -> Tensor:
    s = expit(a.data).astype(DTYPE)
    out = Tensor(s)

    def backward_fn(g: np.ndarray) -> None:
        a.accumulate_grad(g * s * (1.0 - s))

    return _record(out, (a,), backward_fn)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not tensors:
        raise ValueError("concat: need at least one tensor")
    first = tensors[0]
    for i, t in enumerate(tensors[1:], start=1):
        for ax, (d0, dt) in enumerate(zip(first.shape, t.shape)):
            if ax != axis and d0 != dt:
                raise ValueError(
                    f"concat: input {i} differs from input 0 along axis {ax} "
                    f"({dt} vs {d0})"
                )
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g: np.ndarray) -> None:
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(lo, hi)
                t.accumulate_grad(g[tuple(index)])

    return _record(out, tuple(tensors), backward_fn)


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute difference over all elements (scalar output).

    For equal-size samples this equals the per-sample mean followed by the
    batch mean. The subgradient at zero difference is 0.
    """
    _check_same_shape("l1_loss", pred, target)
    diff = pred.data.astype(np.float64) - target.data.astype(np.float64)
    out = Tensor(np.abs(diff).mean())
    sign = np.sign(diff).astype(DTYPE)
    inv_n = DTYPE(1.0 / diff.size)

    def backward_fn(g: np.ndarray) -> None:
        if pred.requires_grad:
            pred.accumulate_grad(g * sign * inv_n)
        if target.requires_grad:
            target.accumulate_grad(-g * sign * inv_n)

    return _record(out, (pred, target), backward_fn)


def backward(loss: Tensor) -> None:
    """Backpropagate from a scalar loss through the tape that recorded it."""
    if loss.tape is None:
        raise ValueError(
            "backward: loss was not recorded on a tape "
            "(run the forward pass inside `with Tape():`)"
        )
    loss.tape.run_backward(loss)


def zero_grads(tensors) -> None:
    for t in tensors:
        t.zero_grad()
