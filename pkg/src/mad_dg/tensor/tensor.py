"""Dense float64 tensors and the reverse-mode tape they record onto."""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np


class TensorError(ValueError):
    """Shape or contract violation in a tensor operation."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""

    def __init__(self, op: str, name: str | None = None):
        self.op = op
        self.name = name
        label = f"{op} ({name})" if name else op
        super().__init__(f"non-finite values produced by {label}")


class TapeError(RuntimeError):
    """Misuse of the differentiation tape (double backward, stale inputs)."""


_local = threading.local()


def _grad_enabled() -> bool:
    return getattr(_local, "enabled", True)


@contextmanager
def no_grad():
    """Run operations without recording them."""
    prev = _grad_enabled()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_node", "_tape", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, *, _check: bool = True):
        arr = np.asarray(data, dtype=np.float64)
        if _check and not np.isfinite(arr).all():
            raise NonFiniteError("tensor", name)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._node: int | None = None
        self._tape: Tape | None = None

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
            raise TensorError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, _check=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self._tape is None:
            raise TapeError("tensor was not produced by a recorded operation")
        self._tape.backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}{flag})"

    # arithmetic sugar; the functional forms live in ``ops``
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.add(ops.neg(self), other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        if isinstance(other, Tensor):
            raise TensorError("division is only supported by a scalar")
        return ops.scale(self, 1.0 / float(other))

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class _Node:
    __slots__ = ("op", "inputs", "out", "backward")

    def __init__(self, op, inputs, out, backward):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.backward = backward


class Tape:
    """Ordered record of operations; consumed by exactly one backward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, inputs: Sequence[Tensor], out: Tensor, backward: BackwardFn) -> None:
        if self.consumed:
            raise TapeError("cannot record onto a consumed tape")
        for t in inputs:
            if t._tape is not None and t._tape is not self:
                raise TapeError(f"{op}: input belongs to a different (consumed) tape")
        out._node = len(self.nodes)
        out._tape = self
        out.requires_grad = True
        self.nodes.append(_Node(op, tuple(inputs), out, backward))

    def backward(self, loss: Tensor) -> None:
        if self.consumed:
            raise TapeError("backward already ran on this tape")
        if loss.data.size != 1 or loss.data.ndim != 0:
            raise TensorError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
        if loss._tape is not self:
            raise TapeError("loss was not recorded on this tape")
        self.consumed = True
        if getattr(_local, "tape", None) is self:
            _local.tape = Tape()
        grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if inp._node is None:
                    inp.grad = ig.copy() if inp.grad is None else inp.grad + ig
                else:
                    key = id(inp)
                    prev = grads.get(key)
                    grads[key] = ig if prev is None else prev + ig
        self.nodes = []


def current_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None or tape.consumed:
        tape = Tape()
        _local.tape = tape
    return tape


def reset_tape() -> None:
    """Discard any operations recorded on this thread without a backward pass."""
    _local.tape = Tape()


def make_output(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    """Wrap an op result, check finiteness, and record it when any input needs gradients."""
    if not np.isfinite(data).all():
        names = [t.name for t in inputs if t.name]
        raise NonFiniteError(op, names[0] if names else None)
    out = Tensor(data, _check=False)
    if _grad_enabled() and any(t.requires_grad for t in inputs):
        current_tape().record(op, inputs, out, backward)
    return out
