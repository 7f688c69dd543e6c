"""
Dense tensors recorded on a dynamic tape for reverse-mode differentiation.

Each `Tensor` produced by an op keeps its parents and a backward rule mapping the output
gradient to one gradient per parent.  `backward` topologically orders the graph reachable from
a scalar loss and visits every node once in reverse order.
"""

from __future__ import annotations
import contextlib
import itertools
import threading
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt

from voxjepa.errors import ShapeError

BackwardFn = Callable[[npt.NDArray], Sequence[Optional[npt.NDArray]]]
ArrayLike = Union[npt.ArrayLike, "Tensor"]

_node_ids = itertools.count()
_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def get_default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float64))


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Ops inside this context record nothing on the tape."""
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def default_dtype(dtype: npt.DTypeLike) -> Iterator[None]:
    """Tensors created inside this context use `dtype` (float64 or the float32 fast mode)."""
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ValueError(f"default dtype must be float32 or float64, got {dtype}")
    prev = get_default_dtype()
    _state.dtype = dtype
    try:
        yield
    finally:
        _state.dtype = prev


class Tensor:
    """
    Attributes:
        - `values`: ndarray of the default dtype
        - `grad`: accumulated gradient (same shape as `values`) or `None`
        - `requires_grad`: whether gradients flow to or through this tensor
        - `parents`: input tensors of the op that produced this one
        - `node_id`: creation order on the tape
    """

    __slots__ = ("values", "grad", "requires_grad", "parents", "_backward", "node_id", "op")

    def __init__(
        self,
        values: npt.ArrayLike,
        requires_grad: bool = False,
        parents: Tuple[Tensor, ...] = (),
        backward: Optional[BackwardFn] = None,
        op: str = "leaf",
    ):
        self.values = np.asarray(values, dtype=get_default_dtype())
        self.grad: Optional[npt.NDArray] = None
        self.requires_grad = requires_grad
        self.parents = parents
        self._backward = backward
        self.node_id = next(_node_ids)
        self.op = op

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def detach(self) -> Tensor:
        """Same values, cut from the tape."""
        return Tensor(self.values, requires_grad=False)

    def numpy(self) -> npt.NDArray:
        return self.values

    def item(self) -> float:
        return float(self.values.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # operator sugar; the differentiable rules live in `voxjepa.autodiff.ops`
    def __add__(self, other: ArrayLike) -> Tensor:
        from voxjepa.autodiff import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other: ArrayLike) -> Tensor:
        from voxjepa.autodiff import ops

        return ops.sub(self, other)

    def __rsub__(self, other: ArrayLike) -> Tensor:
        from voxjepa.autodiff import ops

        return ops.sub(other, self)

    def __mul__(self, other: ArrayLike) -> Tensor:
        from voxjepa.autodiff import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other: ArrayLike) -> Tensor:
        from voxjepa.autodiff import ops

        return ops.div(self, other)

    def __neg__(self) -> Tensor:
        from voxjepa.autodiff import ops

        return ops.neg(self)

    def __matmul__(self, other: ArrayLike) -> Tensor:
        from voxjepa.autodiff import ops

        return ops.matmul(self, other)

    def __getitem__(self, idx) -> Tensor:
        from voxjepa.autodiff import ops

        return ops.index_gather(self, idx)

    def reshape(self, *shape) -> Tensor:
        from voxjepa.autodiff import ops

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        from voxjepa.autodiff import ops

        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        from voxjepa.autodiff import ops

        return ops.mean(self, axis=axis, keepdims=keepdims)

    @property
    def T(self) -> Tensor:
        from voxjepa.autodiff import ops

        return ops.transpose(self)


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(values: npt.ArrayLike) -> Tensor:
    return Tensor(values, requires_grad=True, op="param")


def make_node(
    values: npt.NDArray, parents: Sequence[Tensor], backward_fn: BackwardFn, op: str
) -> Tensor:
    """Result of an op; recorded on the tape only when grad is enabled and a parent needs it."""
    needs = grad_enabled() and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(values, requires_grad=False, op=op)
    return Tensor(values, requires_grad=True, parents=tuple(parents), backward=backward_fn, op=op)


def topological_order(root: Tensor) -> List[Tensor]:
    """Nodes reachable from `root` with every node after all of its parents."""
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in visited:
            continue
        visited.add(node.node_id)
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and parent.node_id not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """
    Accumulates d(loss)/d(leaf) into `.grad` of every leaf with `requires_grad`.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {loss.node_id: np.ones_like(loss.values)}
    for node in reversed(topological_order(loss)):
        g = grads.pop(node.node_id, None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise ShapeError(
                    f"backward of {node.op} produced gradient {pg.shape} for input {parent.shape}"
                )
            if parent.node_id in grads:
                grads[parent.node_id] = grads[parent.node_id] + pg
            else:
                grads[parent.node_id] = pg
