"""Differentiable operators.

Broadcasting is limited to scalar-vs-tensor and same-shape operands, with
the explicit bias forms in ``linear`` and ``conv2d``.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import kernels
from .tensor import Tensor, TensorError, make_output

Operand = Tensor | float | int


def _pair(a: Tensor, b: Operand, op: str):
    if isinstance(b, Tensor):
        if b.shape != a.shape and b.size != 1 and a.size != 1:
            raise TensorError(f"{op}: shape mismatch {list(a.shape)} vs {list(b.shape)}")
        return b
    return float(b)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a: Tensor, b: Operand) -> Tensor:
    b = _pair(a, b, "add")
    if isinstance(b, Tensor):
        def backward(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
        return make_output("add", a.data + b.data, (a, b), backward)
    return make_output("add", a.data + b, (a,), lambda g: (g,))


def sub(a: Tensor, b: Operand) -> Tensor:
    b = _pair(a, b, "sub")
    if isinstance(b, Tensor):
        def backward(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
        return make_output("sub", a.data - b.data, (a, b), backward)
    return make_output("sub", a.data - b, (a,), lambda g: (g,))


def mul(a: Tensor, b: Operand) -> Tensor:
    b = _pair(a, b, "mul")
    if isinstance(b, Tensor):
        def backward(g):
            return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
        return make_output("mul", a.data * b.data, (a, b), backward)
    return scale(a, b)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return make_output("scale", a.data * c, (a,), lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return make_output("neg", -a.data, (a,), lambda g: (-g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_output("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-a.data))
    return make_output("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return make_output("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def square(a: Tensor) -> Tensor:
    return make_output("square", a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def apply_elementwise(x: Tensor, f: str, other: Operand | None = None) -> Tensor:
    """Dispatch by name: add, sub, mul, scale, relu, sigmoid, tanh."""
    binary = {"add": add, "sub": sub, "mul": mul, "scale": scale}
    unary = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh}
    if f in binary:
        if other is None:
            raise TensorError(f"{f} needs a second operand")
        return binary[f](x, other)
    if f in unary:
        return unary[f](x)
    raise TensorError(f"unknown elementwise function {f!r}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise TensorError(f"matmul: shape mismatch {list(a.shape)} @ {list(b.shape)}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g
    return make_output("matmul", a.data @ b.data, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """y = x w + b for x [B, I], w [I, O], b [O]."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise TensorError(f"linear: shape mismatch {list(x.shape)} @ {list(w.shape)}")
    if b is not None and b.shape != (w.shape[1],):
        raise TensorError(f"linear: bias shape {list(b.shape)} != [{w.shape[1]}]")
    y = x.data @ w.data
    if b is not None:
        y = y + b.data
        inputs = (x, w, b)
    else:
        inputs = (x, w)

    def backward(g):
        grads = [g @ w.data.T, x.data.T @ g]
        if b is not None:
            grads.append(g.sum(axis=0))
        return grads
    return make_output("linear", y, inputs, backward)


def conv_output_extent(n: int, k: int, stride: int, dilation: int, padding: int) -> int:
    span = n + 2 * padding - dilation * (k - 1) - 1
    if span < 0:
        return 0
    return span // stride + 1


def conv2d(x: Tensor, k: Tensor, b: Tensor | None = None, stride: int = 1, dilation: int = 1,
           padding: int = 0) -> Tensor:
    """Cross-correlation of x [B, C, H, W] with dilated kernel taps k [O, C, kh, kw]."""
    if x.data.ndim != 4 or k.data.ndim != 4 or x.shape[1] != k.shape[1]:
        raise TensorError(f"conv2d: shape mismatch {list(x.shape)} * {list(k.shape)}")
    if stride < 1 or dilation < 1 or padding < 0:
        raise TensorError("conv2d: stride and dilation must be >= 1, padding >= 0")
    B, C, H, W = x.shape
    O, _, kh, kw = k.shape
    ho = conv_output_extent(H, kh, stride, dilation, padding)
    wo = conv_output_extent(W, kw, stride, dilation, padding)
    if ho <= 0 or wo <= 0:
        raise TensorError(f"conv2d: non-positive output extent {ho}x{wo}")
    if b is not None and b.shape != (O,):
        raise TensorError(f"conv2d: bias shape {list(b.shape)} != [{O}]")
    p = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else np.ascontiguousarray(x.data)
    w = np.ascontiguousarray(k.data)
    y = kernels.conv2d_forward(xp, w, stride, dilation, ho, wo)
    if b is not None:
        y += b.data[None, :, None, None]
    inputs = (x, k) if b is None else (x, k, b)

    def backward(g):
        g = np.ascontiguousarray(g)
        gx = None
        if x.requires_grad:
            gxp = kernels.conv2d_backward_input(g, w, stride, dilation, H + 2 * p, W + 2 * p)
            gx = gxp[:, :, p:p + H, p:p + W] if p else gxp
        gw = kernels.conv2d_backward_weight(g, xp, stride, dilation, kh, kw) if k.requires_grad else None
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads
    return make_output("conv2d", y, inputs, backward)


def grad_reverse(x: Tensor, mu: float = 1.0) -> Tensor:
    """Identity forward; backward scales the upstream gradient by -mu."""
    mu = float(mu)
    if mu < 0:
        raise TensorError(f"grad_reverse: mu must be >= 0, got {mu}")
    return make_output("grad_reverse", x.data, (x,), lambda g: (-mu * g,))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return make_output("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_output("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def sum(x: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:  # noqa: A001
    src = x.shape
    y = x.data.sum(axis=axis)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)
    return make_output("sum", np.asarray(y), (x,), backward)


def mean(x: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:
    src = x.shape
    y = x.data.mean(axis=axis)
    n = x.size / max(1, np.asarray(y).size)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, src).copy(),)
    return make_output("mean", np.asarray(y), (x,), backward)


def take_rows(x: Tensor, index: Sequence[int]) -> Tensor:
    """Gather rows x[index] along axis 0."""
    idx = np.asarray(index, dtype=np.int64)
    src = x.shape

    def backward(g):
        out = np.zeros(src)
        np.add.at(out, idx, g)
        return (out,)
    return make_output("take_rows", x.data[idx], (x,), backward)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    sizes = [p.shape[0] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return [g[bounds[i]:bounds[i + 1]] for i in range(len(parts))]
    return make_output("concat_rows", np.concatenate([p.data for p in parts], axis=0), tuple(parts), backward)


def box_pool(fmap: Tensor, cells: Sequence[tuple[int, int, int, int, int]]) -> Tensor:
    """Channelwise mean of fmap [B, C, h, w] over cell rectangles (image, r0, c0, r1, c1), end-exclusive."""
    if fmap.data.ndim != 4:
        raise TensorError("box_pool expects a [B, C, h, w] map")
    B, C, h, w = fmap.shape
    rows = []
    for (bi, r0, c0, r1, c1) in cells:
        if not (0 <= bi < B and 0 <= r0 < r1 <= h and 0 <= c0 < c1 <= w):
            raise TensorError(f"box_pool: cell rectangle {(bi, r0, c0, r1, c1)} covers no cells of a {h}x{w} map")
        rows.append(fmap.data[bi, :, r0:r1, c0:c1].mean(axis=(1, 2)))
    y = np.stack(rows) if rows else np.zeros((0, C))

    def backward(g):
        out = np.zeros(fmap.shape)
        for n, (bi, r0, c0, r1, c1) in enumerate(cells):
            area = (r1 - r0) * (c1 - c0)
            out[bi, :, r0:r1, c0:c1] += (g[n] / area)[:, None, None]
        return (out,)
    return make_output("box_pool", y, (fmap,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)
    return make_output("softmax", y, (x,), backward)


def row_norm(x: Tensor) -> Tensor:
    """Euclidean norm of each row of x [N, D]; gradient taken as 0 at a zero row."""
    if x.data.ndim != 2:
        raise TensorError("row_norm expects [N, D]")
    n = np.sqrt((x.data * x.data).sum(axis=1))
    safe = np.where(n > 0, n, 1.0)

    def backward(g):
        return (np.where((n > 0)[:, None], x.data / safe[:, None], 0.0) * g[:, None],)
    return make_output("row_norm", n, (x,), backward)


def mse(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise TensorError(f"mse: shape mismatch {list(pred.shape)} vs {list(target.shape)}")
    if pred.size == 0:
        raise TensorError("mse: empty batch")
    d = pred.data - target.data
    n = d.size

    def backward(g):
        gd = (2.0 / n) * d * g
        return gd, -gd
    return make_output("mse", np.asarray((d * d).sum() / n), (pred, target), backward)


def softmax_cross_entropy(logits: Tensor, target: Sequence[int]) -> Tensor:
    """Mean over rows of -log softmax(logits)[target]."""
    if logits.data.ndim != 2:
        raise TensorError("softmax_cross_entropy expects [N, K] logits")
    N, K = logits.shape
    t = np.asarray(target, dtype=np.int64).reshape(-1)
    if N == 0:
        raise TensorError("softmax_cross_entropy: empty batch")
    if t.shape[0] != N:
        raise TensorError(f"softmax_cross_entropy: {t.shape[0]} targets for {N} rows")
    if t.min() < 0 or t.max() >= K:
        raise TensorError(f"softmax_cross_entropy: class index out of range for {K} classes")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    logp = z - lse[:, None]
    loss = -logp[np.arange(N), t].sum() / N

    def backward(g):
        p = np.exp(logp)
        p[np.arange(N), t] -= 1.0
        return (p * (g / N),)
    return make_output("softmax_cross_entropy", np.asarray(loss), (logits,), backward)


def reduce_loss(pred: Tensor, target, kind: str) -> Tensor:
    if kind == "mse":
        return mse(pred, target if isinstance(target, Tensor) else Tensor(target))
    if kind == "softmax_cross_entropy":
        return softmax_cross_entropy(pred, np.atleast_1d(target))
    raise TensorError(f"unknown loss kind {kind!r}")
