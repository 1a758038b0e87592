"""Tape-based reverse-mode automatic differentiation.

Every differentiable op appends one :class:`TapeEntry` to the thread's active
tape when at least one of its inputs requires a gradient. :func:`backward`
replays the tape in exact reverse recording order and then clears it.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence

import numpy as np


class TensorError(Exception):
    """Base class for numerical-core errors."""


class DimensionError(TensorError, ValueError):
    pass


class ContractError(TensorError, ValueError):
    pass


class ParameterError(TensorError, ValueError):
    pass


class Tensor:
    """Dense float64 array with an optional gradient and tape node id.

    ``node`` is ``None`` for leaves (parameters and constants); op outputs
    carry the index of the tape entry that produced them.
    """

    __slots__ = ("data", "grad", "requires_grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node: Optional[int] = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # operator sugar; the functions live in ops to keep one implementation
    def __add__(self, other):
        from .ops import add

        return add(self, other)

    def __sub__(self, other):
        from .ops import sub

        return sub(self, other)

    def __mul__(self, other):
        from .ops import mul, scale

        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        from .ops import scale

        return scale(self, -1.0)

    def __matmul__(self, other):
        from .ops import matmul

        return matmul(self, other)


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class TapeEntry:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


@dataclass
class Tape:
    entries: list[TapeEntry] = field(default_factory=list)

    def record(self, op: str, inputs: tuple[Tensor, ...], output: Tensor, fn: BackwardFn) -> None:
        output.node = len(self.entries)
        self.entries.append(TapeEntry(op, inputs, output, fn))

    def clear(self) -> None:
        for e in self.entries:
            e.output.node = None
        self.entries.clear()

    def __len__(self) -> int:
        return len(self.entries)


class _State(threading.local):
    def __init__(self) -> None:
        self.tape = Tape()
        self.grad_enabled = True


_state = _State()


def current_tape() -> Tape:
    return _state.tape


def is_grad_enabled() -> bool:
    return _state.grad_enabled


@contextmanager
def no_grad() -> Iterator[None]:
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextmanager
def fresh_tape() -> Iterator[Tape]:
    """Run a block on a private tape, restoring the previous one afterwards."""
    prev = _state.tape
    _state.tape = Tape()
    try:
        yield _state.tape
    finally:
        _state.tape = prev


def make_output(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], fn: BackwardFn) -> Tensor:
    out = Tensor(data)
    if _state.grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _state.tape.record(op, inputs, out, fn)
    return out


def backward(loss: Tensor) -> list[int]:
    """Populate ``.grad`` on every leaf reachable from ``loss``.

    Leaf gradients accumulate into existing ``.grad`` arrays. Returns the tape
    indices visited, which is always a strictly decreasing sequence.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward() expects a scalar loss, got shape {loss.shape}")
    tape = _state.tape
    visited: list[int] = []
    if not loss.requires_grad:
        tape.clear()
        return visited
    seed = np.ones_like(loss.data)
    if loss.node is None:
        _accumulate_leaf(loss, seed)
        tape.clear()
        return visited
    grads: dict[int, np.ndarray] = {loss.node: seed}
    for idx in range(len(tape.entries) - 1, -1, -1):
        g = grads.pop(idx, None)
        if g is None:
            continue
        visited.append(idx)
        entry = tape.entries[idx]
        in_grads = entry.backward(g)
        for inp, gi in zip(entry.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp.node is None:
                _accumulate_leaf(inp, gi)
            elif inp.node in grads:
                grads[inp.node] = grads[inp.node] + gi
            else:
                grads[inp.node] = gi
    tape.clear()
    return visited


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=np.float64).reshape(t.data.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g
