"""AdamW with decoupled weight decay over named parameter tensors."""

from __future__ import annotations
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
import numpy.typing as npt

from voxjepa import defaults
from voxjepa.autodiff.tensor import Tensor
from voxjepa.errors import ShapeError


@dataclass
class AdamWState:
    """
    Attributes:
        - `m`: first-moment estimate
        - `v`: second-moment estimate
        - `step`: number of updates applied so far
    """

    m: npt.NDArray
    v: npt.NDArray
    step: int = 0

    @classmethod
    def zeros_like(cls, values: npt.NDArray) -> AdamWState:
        return cls(m=np.zeros_like(values), v=np.zeros_like(values))


def adamw_step(
    param: npt.NDArray,
    grad: npt.NDArray,
    state: AdamWState,
    lr: float,
    betas: Tuple[float, float] = defaults.ADAM_BETAS,
    eps: float = defaults.ADAM_EPS,
    weight_decay: float = defaults.WEIGHT_DECAY,
) -> npt.NDArray:
    """
    Returns the updated parameter and advances `state` in place.

    The decay term `lr * weight_decay * param` is applied to the parameter directly rather than
    folded into the gradient.
    """
    if grad.shape != param.shape:
        raise ShapeError(f"adamw_step: grad {grad.shape} does not match param {param.shape}")
    b1, b2 = betas
    state.step += 1
    state.m = b1 * state.m + (1.0 - b1) * grad
    state.v = b2 * state.v + (1.0 - b2) * grad**2
    m_hat = state.m / (1.0 - b1**state.step)
    v_hat = state.v / (1.0 - b2**state.step)
    decayed = param - lr * weight_decay * param
    return decayed - lr * m_hat / (np.sqrt(v_hat) + eps)


@dataclass
class AdamW:
    """
    Optimizer over a dict of named parameter tensors.  Parameters whose `.grad` is `None` are
    skipped (no moment update, no decay).

    Attributes:
        - `params`: name -> leaf tensor with `requires_grad`
        - `lr`, `betas`, `eps`, `weight_decay`: AdamW hyperparameters; `lr` is overwritten by
          the schedule each step
        - `no_decay`: names excluded from weight decay (biases, norms, mask token)
    """

    params: Dict[str, Tensor]
    lr: float = defaults.LR
    betas: Tuple[float, float] = defaults.ADAM_BETAS
    eps: float = defaults.ADAM_EPS
    weight_decay: float = defaults.WEIGHT_DECAY
    no_decay: Tuple[str, ...] = ()
    state: Dict[str, AdamWState] = field(default_factory=dict)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr: Optional[float] = None) -> None:
        if lr is not None:
            self.lr = lr
        for name in sorted(self.params):
            p = self.params[name]
            if p.grad is None:
                continue
            st = self.state.setdefault(name, AdamWState.zeros_like(p.values))
            wd = 0.0 if self._is_no_decay(name) else self.weight_decay
            p.values = adamw_step(p.values, p.grad, st, self.lr, self.betas, self.eps, wd)

    def _is_no_decay(self, name: str) -> bool:
        leaf = name.rsplit(".", 1)[-1]
        return leaf in self.no_decay or name in self.no_decay
