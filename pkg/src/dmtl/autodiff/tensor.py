"""Tensor value type, the operation tape and named parameters."""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

_local = threading.local()

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """Dense N-d array with an optional gradient slot.

    Arithmetic goes through the functions in :mod:`dmtl.autodiff.ops`; a
    Tensor itself only carries values and bookkeeping.
    """

    __slots__ = ("data", "requires_grad", "grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


@dataclass
class Tape:
    """Ordered record of the differentiable ops of one forward pass.

    Use as a context manager; ops executed inside the ``with`` block whose
    inputs require gradients are appended in execution order.
    """

    nodes: list[Node] = field(default_factory=list)
    check_finite: bool = False

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        popped = stack.pop()
        assert popped is self, "tape stack corrupted"

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward: BackwardFn) -> None:
        if self.check_finite and not output.is_finite():
            raise FloatingPointError(f"non-finite output from {op}")
        self.nodes.append(Node(op, tuple(inputs), output, backward))

    def __len__(self) -> int:
        return len(self.nodes)


def _tape_stack() -> list[Tape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def make_output(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    """Wrap ``data`` and record it on the active tape when any input needs a gradient."""
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(op, inputs, out, backward)
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Reverse-mode sweep over ``tape`` seeded with d(loss)/d(loss) = 1.

    Gradients are summed into ``.grad`` of every leaf tensor that requires
    one. Leaves that the loss does not reach are left untouched, so callers
    zero parameter gradients beforehand.
    """
    if loss.ndim != 0:
        raise ShapeError(f"backward needs a 0-d loss, got shape {loss.shape}")
    produced = {id(n.output) for n in tape.nodes}
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
    for node in reversed(tape.nodes):
        gout = grads.pop(id(node.output), None)
        if gout is None:
            continue
        gins = node.backward(gout)
        for t, g in zip(node.inputs, gins):
            if g is None or not t.requires_grad:
                continue
            key = id(t)
            if key in produced:
                prev = grads.get(key)
                grads[key] = g if prev is None else prev + g
            else:
                t.grad = g.astype(t.dtype, copy=True) if t.grad is None else t.grad + g
    # the loss itself may be a leaf (no ops recorded)
    if id(loss) not in produced and loss.requires_grad and id(loss) in grads:
        g = grads[id(loss)]
        loss.grad = g.copy() if loss.grad is None else loss.grad + g


@dataclass
class Parameter:
    """A named trainable tensor; ``name`` is dotted, e.g. ``encoder.stage1.block0.conv1.weight``."""

    name: str
    tensor: Tensor

    def __post_init__(self) -> None:
        self.tensor.requires_grad = True
        if self.tensor.grad is None:
            self.tensor.zero_grad()

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> np.ndarray:
        return self.tensor.grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.tensor.shape
