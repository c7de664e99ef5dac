"""Seeded tensor construction."""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .tensor import Tensor, TensorError

MAX_ELEMENTS = 1 << 32


def check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if any(s <= 0 for s in shape):
        raise TensorError(f"extents must be positive, got {list(shape)}")
    if math.prod(shape) > MAX_ELEMENTS:
        raise TensorError(f"shape {list(shape)} overflows the element limit {MAX_ELEMENTS}")
    return shape


def tensor_new(shape: Sequence[int], init="zeros", rng: np.random.Generator | None = None,
               requires_grad: bool = False, name: str | None = None) -> Tensor:
    """Build a tensor.

    ``init`` is ``"zeros"``, ``("constant", c)``, ``("uniform", a, b)`` or
    ``("kaiming", fan_in)`` (uniform in +-sqrt(6 / fan_in)). Random inits need ``rng``.
    """
    shape = check_shape(shape)
    kind, *args = (init,) if isinstance(init, str) else init
    if kind == "zeros":
        data = np.zeros(shape)
    elif kind == "constant":
        data = np.full(shape, float(args[0]))
    elif kind in ("uniform", "kaiming"):
        if rng is None:
            raise TensorError(f"{kind} init needs an rng")
        if kind == "uniform":
            a, b = float(args[0]), float(args[1])
            if not a < b:
                raise TensorError(f"uniform init needs a < b, got ({a}, {b})")
        else:
            fan_in = int(args[0])
            if fan_in <= 0:
                raise TensorError("kaiming init needs a positive fan_in")
            b = math.sqrt(6.0 / fan_in)
            a = -b
        data = rng.uniform(a, b, size=shape)
    else:
        raise TensorError(f"unknown init {kind!r}")
    return Tensor(data, requires_grad=requires_grad, name=name)
