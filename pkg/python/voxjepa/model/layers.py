"""
Parameter containers and transformer building blocks composed from autodiff primitives.
"""

from __future__ import annotations
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np
import numpy.typing as npt

from voxjepa import defaults
from voxjepa.autodiff import ops
from voxjepa.autodiff.tensor import Tensor, parameter
from voxjepa.errors import ShapeError


def sincos_posenc(
    coords: npt.ArrayLike, dim: int, temperature: float = defaults.POSENC_TEMPERATURE
) -> npt.NDArray[np.float64]:
    """
    Fixed 3D sinusoidal encoding of integer (z, y, x) coordinates.

    Each axis gets `dim // 6` frequencies, written as a sine block then a cosine block, axes
    concatenated in (z, y, x) order; leftover columns (when `dim` is not a multiple of 6) are 0.
    """
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    n_freq = dim // 6
    if n_freq == 0:
        raise ValueError(f"posenc dim {dim} is smaller than 6")
    omega = 1.0 / temperature ** (np.arange(n_freq, dtype=np.float64) / n_freq)
    parts = []
    for axis in range(3):
        angle = coords[:, axis : axis + 1] * omega[None, :]
        parts.append(np.sin(angle))
        parts.append(np.cos(angle))
    out = np.concatenate(parts, axis=1)
    if out.shape[1] < dim:
        out = np.pad(out, ((0, 0), (0, dim - out.shape[1])))
    return out


class Module:
    """
    Parameters are `Tensor` attributes; submodules are `Module` attributes or lists of them.
    Names are dotted attribute paths in definition order.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> Dict[str, Tensor]:
        return dict(self.named_parameters())

    def state_arrays(self) -> Dict[str, npt.NDArray]:
        return {k: v.values.copy() for k, v in self.named_parameters()}

    def load_arrays(self, arrays: Dict[str, npt.NDArray]) -> None:
        """Copies `arrays` into the parameters; names and shapes must match exactly."""
        params = self.parameters()
        missing = sorted(set(params) - set(arrays))
        extra = sorted(set(arrays) - set(params))
        if missing or extra:
            raise ValueError(f"parameter names differ: missing {missing}, unexpected {extra}")
        for name, p in params.items():
            arr = np.asarray(arrays[name])
            if arr.shape != p.shape:
                raise ShapeError(f"parameter {name}: stored {arr.shape}, expected {p.shape}")
            p.values = arr.astype(p.values.dtype, copy=True)

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, std: float = defaults.INIT_STD):
        self.weight = parameter(rng.normal(0.0, std, size=(d_in, d_out)))
        self.bias = parameter(np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = defaults.LN_EPS):
        self.gamma = parameter(np.ones(dim))
        self.beta = parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.eps) * self.gamma + self.beta


class Attention(Module):
    """Multi-head self-attention over a (T, d) sequence."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, std: float = defaults.INIT_STD):
        if dim % heads != 0:
            raise ValueError(f"dim {dim} is not divisible by heads {heads}")
        self.heads = heads
        self.qkv = Linear(dim, 3 * dim, rng, std)
        self.proj = Linear(dim, dim, rng, std)

    def __call__(self, x: Tensor, mask: Optional[npt.NDArray] = None) -> Tensor:
        n, dim = x.shape
        dh = dim // self.heads
        qkv = self.qkv(x).reshape(n, 3, self.heads, dh)
        qkv = ops.transpose(qkv, (1, 2, 0, 3))
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = ops.matmul(q, ops.transpose(k)) * (1.0 / np.sqrt(dh))
        attn = ops.softmax_rows(scores, mask)
        out = ops.transpose(ops.matmul(attn, v), (1, 0, 2)).reshape(n, dim)
        return self.proj(out)


class Mlp(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, std: float = defaults.INIT_STD):
        self.fc1 = Linear(dim, hidden, rng, std)
        self.fc2 = Linear(hidden, dim, rng, std)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ops.gelu(self.fc1(x)))


class Block(Module):
    """Pre-norm transformer block: `x + attn(ln(x))` then `x + mlp(ln(x))`."""

    def __init__(
        self,
        dim: int,
        heads: int,
        mlp_dim: int,
        rng: np.random.Generator,
        std: float = defaults.INIT_STD,
        eps: float = defaults.LN_EPS,
    ):
        self.norm1 = LayerNorm(dim, eps)
        self.attn = Attention(dim, heads, rng, std)
        self.norm2 = LayerNorm(dim, eps)
        self.mlp = Mlp(dim, mlp_dim, rng, std)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


def make_blocks(
    depth: int, dim: int, heads: int, mlp_dim: int, rng: np.random.Generator, std: float, eps: float
) -> List[Block]:
    return [Block(dim, heads, mlp_dim, rng, std, eps) for _ in range(depth)]
