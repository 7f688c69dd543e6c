"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations
import logging
from typing import Callable, Dict, Optional

import numpy as np

from voxjepa.autodiff.tensor import Tensor, backward, no_grad

log = logging.getLogger(__name__)

DEFAULT_STEP = 1e-5


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-5)


def numeric_grad(
    loss_fn: Callable[[], Tensor],
    param: Tensor,
    index: tuple,
    h: float = DEFAULT_STEP,
) -> float:
    """Central difference of `loss_fn()` with respect to `param.values[index]`."""
    orig = param.values[index]
    with no_grad():
        param.values[index] = orig + h
        up = loss_fn().item()
        param.values[index] = orig - h
        down = loss_fn().item()
    param.values[index] = orig
    return (up - down) / (2.0 * h)


def gradcheck(
    loss_fn: Callable[[], Tensor],
    params: Dict[str, Tensor],
    h: float = DEFAULT_STEP,
    max_entries_per_tensor: Optional[int] = None,
    seed: int = 0,
) -> Dict[str, float]:
    """
    Returns the worst relative error per parameter between analytic gradients (from one
    backward pass of `loss_fn()`) and central differences.

    Arguments:
    ----------
    loss_fn: rebuilds the scalar loss from the current parameter values
    params: name -> leaf tensor with `requires_grad`
    max_entries_per_tensor: when set, only that many randomly chosen entries are probed
    """
    for p in params.values():
        p.zero_grad()
    backward(loss_fn())
    rng = np.random.default_rng(seed)
    worst: Dict[str, float] = {}
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.values)
        flat_ids = np.arange(p.size)
        if max_entries_per_tensor is not None and p.size > max_entries_per_tensor:
            flat_ids = rng.choice(p.size, size=max_entries_per_tensor, replace=False)
        err = 0.0
        for flat in flat_ids:
            idx = np.unravel_index(int(flat), p.shape)
            num = numeric_grad(loss_fn, p, idx, h)
            err = max(err, relative_error(float(analytic[idx]), num))
        worst[name] = err
        log.debug(f"gradcheck {name}: max relative error {err:.3g}")
    return worst
