"""Reverse-mode automatic differentiation over numpy arrays."""

from voxjepa.autodiff.tensor import (
    Tensor,
    as_tensor,
    backward,
    default_dtype,
    grad_enabled,
    no_grad,
    parameter,
)
from voxjepa.autodiff import ops
from voxjepa.autodiff.optim import AdamW, AdamWState, adamw_step
from voxjepa.autodiff.checkpoint import load_checkpoint, save_checkpoint
from voxjepa.autodiff.gradcheck import gradcheck

__all__ = [
    "Tensor",
    "as_tensor",
    "backward",
    "default_dtype",
    "grad_enabled",
    "no_grad",
    "parameter",
    "ops",
    "AdamW",
    "AdamWState",
    "adamw_step",
    "load_checkpoint",
    "save_checkpoint",
    "gradcheck",
]
