"""Differentiable primitives.  Every op checks shapes and raises `ShapeError` naming itself."""

from __future__ import annotations
import builtins
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt

from voxjepa.autodiff.tensor import ArrayLike, Tensor, as_tensor, make_node
from voxjepa.errors import ShapeError

Axis = Optional[Union[int, Tuple[int, ...]]]

_GELU_K = np.sqrt(2.0 / np.pi)


def unbroadcast(grad: npt.NDArray, shape: Tuple[int, ...]) -> npt.NDArray:
    """Sums `grad` over the axes that broadcasting expanded to reach `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return make_node(a.values + b.values, (a, b), bw, "add")


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return make_node(a.values - b.values, (a, b), bw, "sub")


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def bw(g):
        return unbroadcast(g * b.values, a.shape), unbroadcast(g * a.values, b.shape)

    return make_node(a.values * b.values, (a, b), bw, "mul")


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)

    def bw(g):
        return (
            unbroadcast(g / b.values, a.shape),
            unbroadcast(-g * a.values / b.values**2, b.shape),
        )

    return make_node(a.values / b.values, (a, b), bw, "div")


def neg(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return make_node(-a.values, (a,), lambda g: (-g,), "neg")


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Matrix product over the last two axes with broadcast leading (batch) axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.values, b.values)
    except ValueError:
        raise ShapeError(f"matmul: batch axes of {a.shape} and {b.shape} do not broadcast") from None

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.values, -1, -2))
        gb = np.matmul(np.swapaxes(a.values, -1, -2), g)
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return make_node(out, (a, b), bw, "matmul")


def transpose(a: ArrayLike, axes: Optional[Sequence[int]] = None) -> Tensor:
    """Permutes axes; by default swaps the last two."""
    a = as_tensor(a)
    if axes is None:
        if a.ndim < 2:
            raise ShapeError(f"transpose: needs at least 2 dims, got shape {a.shape}")
        axes = list(range(a.ndim - 2)) + [a.ndim - 1, a.ndim - 2]
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} do not permute shape {a.shape}")
    inverse = tuple(int(i) for i in np.argsort(axes))
    return make_node(
        np.transpose(a.values, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose"
    )


def reshape(a: ArrayLike, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.values.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None
    return make_node(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def index_gather(a: ArrayLike, idx) -> Tensor:
    """`a[idx]` with repeated indices accumulating gradient."""
    a = as_tensor(a)
    if isinstance(idx, (list, np.ndarray)):
        idx = np.asarray(idx)
        if idx.dtype != bool and idx.size and (idx.max() >= a.shape[0] or idx.min() < -a.shape[0]):
            raise ShapeError(f"index_gather: index out of range for axis 0 of shape {a.shape}")
    try:
        out = a.values[idx]
    except IndexError as err:
        raise ShapeError(f"index_gather: {err} for shape {a.shape}") from None

    def bw(g):
        full = np.zeros_like(a.values)
        np.add.at(full, idx, g)
        return (full,)

    return make_node(np.array(out), (a,), bw, "index_gather")


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no inputs")
    ref = list(ts[0].shape)
    for t in ts[1:]:
        other = list(t.shape)
        if len(other) != len(ref) or any(
            x != y for i, (x, y) in enumerate(zip(ref, other)) if i != axis % len(ref)
        ):
            raise ShapeError(f"concat: shapes {[t.shape for t in ts]} differ off axis {axis}")
    out = np.concatenate([t.values for t in ts], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_node(out, tuple(ts), bw, "concat")


def sum(a: ArrayLike, axis: Axis = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.values.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_node(np.asarray(out), (a,), bw, "sum")


def mean(a: ArrayLike, axis: Axis = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[ax] for ax in axes]))
    if count == 0:
        raise ShapeError(f"mean: empty reduction over shape {a.shape}")
    return div(sum(a, axis=axis, keepdims=keepdims), float(count))


def softmax_rows(x: ArrayLike, mask: Optional[npt.ArrayLike] = None) -> Tensor:
    """
    Softmax over the last axis of `x + mask`.  `mask` is an additive constant (0 or -inf);
    masked entries get exactly zero probability.
    """
    x = as_tensor(x)
    z = x.values
    if mask is not None:
        mask = np.asarray(mask, dtype=z.dtype)
        try:
            z = z + mask
        except ValueError:
            raise ShapeError(f"softmax_rows: mask {mask.shape} does not broadcast to {x.shape}") from None
        if np.isneginf(z).all(axis=-1).any():
            raise ValueError("softmax_rows: a row is fully masked")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return make_node(y, (x,), bw, "softmax_rows")


def layer_norm(x: ArrayLike, eps: float = 1e-6) -> Tensor:
    """Normalizes the last axis to zero mean and unit variance (no affine)."""
    x = as_tensor(x)
    mu = x.values.mean(axis=-1, keepdims=True)
    xc = x.values - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    n = x.shape[-1]

    def bw(g):
        gs = g.sum(axis=-1, keepdims=True)
        gx = (g * xhat).sum(axis=-1, keepdims=True)
        return (inv / n * (n * g - gs - xhat * gx),)

    return make_node(xhat, (x,), bw, "layer_norm")


def gelu(x: ArrayLike) -> Tensor:
    """tanh approximation of GELU."""
    x = as_tensor(x)
    v = x.values
    inner = _GELU_K * (v + 0.044715 * v**3)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def bw(g):
        dinner = _GELU_K * (1.0 + 3 * 0.044715 * v**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t**2) * dinner),)

    return make_node(out, (x,), bw, "gelu")


def linear(x: ArrayLike, weight: ArrayLike, bias: Optional[ArrayLike] = None) -> Tensor:
    """`x @ weight + bias` with `weight` of shape (in, out)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    out = matmul(x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
        out = add(out, bias)
    return out


def smooth_l1(pred: ArrayLike, target: ArrayLike, beta: float = 1.0) -> Tensor:
    """
    Mean over elements of `0.5 d^2 / beta` where `|d| < beta`, else `|d| - 0.5 beta`.
    """
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"smooth_l1: pred {pred.shape} and target {target.shape} differ")
    if beta <= 0:
        raise ValueError(f"smooth_l1: beta must be > 0, got {beta}")
    d = pred.values - target.values
    ad = np.abs(d)
    quad = ad < beta
    n = builtins.max(d.size, 1)
    out = np.where(quad, 0.5 * d**2 / beta, ad - 0.5 * beta).sum() / n

    def bw(g):
        gd = g * np.where(quad, d / beta, np.sign(d)) / n
        return gd, -gd

    return make_node(np.asarray(out), (pred, target), bw, "smooth_l1")


def bce_with_logits(
    logits: ArrayLike,
    targets: npt.ArrayLike,
    weights: Optional[npt.ArrayLike] = None,
    normalizer: Optional[float] = None,
) -> Tensor:
    """
    Weighted binary cross-entropy on logits, `sum(w * l) / normalizer`; the normalizer defaults
    to the element count.  `weights` broadcast against `logits` (e.g. per class).
    """
    logits = as_tensor(logits)
    y = np.asarray(targets, dtype=logits.values.dtype)
    if y.shape != logits.shape:
        raise ShapeError(f"bce_with_logits: logits {logits.shape} and targets {y.shape} differ")
    w = np.ones_like(logits.values) if weights is None else np.broadcast_to(
        np.asarray(weights, dtype=logits.values.dtype), logits.shape
    )
    x = logits.values
    per = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
    norm = float(x.size if normalizer is None else normalizer)
    out = (w * per).sum() / norm

    def bw(g):
        sig = 0.5 * (1.0 + np.tanh(0.5 * x))
        return (g * w * (sig - y) / norm,)

    return make_node(np.asarray(out), (logits,), bw, "bce_with_logits")


def stack_rows(rows: List[Tensor]) -> Tensor:
    """Stacks equal-shape tensors along a new leading axis."""
    return concat([reshape(r, (1,) + r.shape) for r in rows], axis=0)
