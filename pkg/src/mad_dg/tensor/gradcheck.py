"""Central finite-difference gradient oracle."""
from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor, TensorError, current_tape, no_grad, reset_tape


def relative_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))


def numeric_grad(f: Callable[[], Tensor], x: Tensor, eps: float = 1e-5, index=None) -> np.ndarray:
    """Central differences of scalar f() w.r.t. the entries of x (all, or the flat ``index`` subset)."""
    if not x.data.flags.c_contiguous or not x.data.flags.writeable:
        x.data = x.data.copy()
    flat = x.data.reshape(-1)
    coords = range(flat.size) if index is None else index
    out = np.zeros(flat.size)
    with no_grad():
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            fp = _scalar(f())
            flat[i] = orig - eps
            fm = _scalar(f())
            flat[i] = orig
            out[i] = (fp - fm) / (2.0 * eps)
    return out.reshape(x.shape)


def _scalar(t: Tensor) -> float:
    if t.data.size != 1:
        raise TensorError(f"finite-difference check needs a scalar function, got shape {list(t.shape)}")
    return float(t.data.reshape(()))


def analytic_grad(f: Callable[[], Tensor], x: Tensor) -> np.ndarray:
    was = x.requires_grad
    x.requires_grad = True
    x.grad = None
    loss = f()
    if loss.data.size != 1:
        raise TensorError(f"finite-difference check needs a scalar function, got shape {list(loss.shape)}")
    loss.backward()
    g = np.zeros(x.shape) if x.grad is None else x.grad
    x.grad = None
    x.requires_grad = was
    return g


def _relu_pattern(f: Callable[[], Tensor]) -> list[np.ndarray]:
    reset_tape()
    f()
    pattern = [node.inputs[0].data > 0 for node in current_tape().nodes if node.op == "relu"]
    reset_tape()
    return pattern


def kink_coordinates(f: Callable[[], Tensor], x: Tensor, eps: float = 1e-5, index=None) -> list[int]:
    """Flat coordinates whose stencil x +- eps flips the sign of some relu input.

    Central differences across a kink do not estimate the derivative, so these
    coordinates are not valid test points.
    """
    was = x.requires_grad
    x.requires_grad = True
    if not x.data.flags.c_contiguous or not x.data.flags.writeable:
        x.data = x.data.copy()
    flat = x.data.reshape(-1)
    coords = range(flat.size) if index is None else index
    kinks = []
    for i in coords:
        orig = flat[i]
        flat[i] = orig + eps
        plus = _relu_pattern(f)
        flat[i] = orig - eps
        minus = _relu_pattern(f)
        flat[i] = orig
        if len(plus) != len(minus) or any(not np.array_equal(p, m) for p, m in zip(plus, minus)):
            kinks.append(int(i))
    x.requires_grad = was
    return kinks


def finite_difference_check(f: Callable[[], Tensor], x: Tensor, eps: float = 1e-5, index=None,
                            skip_kinks: bool = False) -> float:
    """Max over coordinates of |autodiff - central difference| / max(1e-8, |a| + |b|).

    ``f`` takes no arguments and must read ``x`` (which is perturbed in place).
    With ``skip_kinks`` the coordinates found by ``kink_coordinates`` are left out.
    """
    if eps <= 0:
        raise TensorError("eps must be positive")
    a = analytic_grad(f, x).reshape(-1)
    b = numeric_grad(f, x, eps, index).reshape(-1)
    idx = np.arange(a.size) if index is None else np.asarray(list(index), dtype=np.int64)
    if skip_kinks:
        drop = set(kink_coordinates(f, x, eps, idx))
        idx = np.asarray([i for i in idx if int(i) not in drop], dtype=np.int64)
    a, b = a[idx], b[idx]
    if a.size == 0:
        return 0.0
    return float(relative_error(a, b).max())
