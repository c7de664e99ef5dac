"""Parameter groups and momentum SGD."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .tensor import Tensor, TensorError

ROLES = ("extractor", "encoder", "decoder", "domain_classifier", "task_head")


@dataclass
class ParamGroup:
    role: str
    params: dict[str, Tensor] = field(default_factory=dict)
    momentum_buf: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.role not in ROLES:
            raise TensorError(f"unknown parameter role {self.role!r}")

    def add(self, name: str, t: Tensor) -> Tensor:
        if name in self.params:
            raise TensorError(f"duplicate parameter name {name!r}")
        t.requires_grad = True
        t.name = name
        self.params[name] = t
        return t

    def __iter__(self):
        return iter(self.params.items())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None


def check_partition(groups: Iterable[ParamGroup]) -> None:
    """Raise if a tensor or name appears in more than one group."""
    seen_ids: set[int] = set()
    seen_names: set[str] = set()
    for g in groups:
        for name, t in g:
            if id(t) in seen_ids or name in seen_names:
                raise TensorError(f"parameter {name!r} appears in more than one group")
            seen_ids.add(id(t))
            seen_names.add(name)


def sgd_update(group: ParamGroup, lr: float, momentum: float, allow_missing: bool = False) -> ParamGroup:
    """v <- momentum * v + g; w <- w - lr * v; then clear gradients.

    A parameter without a gradient is an error unless ``allow_missing``, in
    which case it is treated as receiving a zero gradient.
    """
    for name, t in group:
        g = t.grad
        if g is None:
            if not allow_missing:
                raise TensorError(f"missing gradient for parameter {name!r}")
            g = np.zeros_like(t.data)
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        v = group.momentum_buf.get(name)
        v = g.copy() if v is None else momentum * v + g
        group.momentum_buf[name] = v
        t.data = t.data - lr * v
        t.grad = None
    return group
