"""Reverse-mode differentiation core: tensors, primitives, losses, optimizer."""

from . import nn, ops
from .losses import (NEG_INF, cross_entropy, gaussian_kl, infonce, mse_loss,
                     smooth_l1_loss, smooth_l1_raw)
from .optim import AdamW
from .ops import PRIMITIVES, stop_gradient, straight_through
from .tensor import (Parameter, ShapeError, Tape, TapeMutationError, Tensor,
                     as_tensor)

__all__ = [
    "AdamW", "NEG_INF", "PRIMITIVES", "Parameter", "ShapeError", "Tape",
    "TapeMutationError", "Tensor", "as_tensor", "cross_entropy", "gaussian_kl",
    "infonce", "mse_loss", "nn", "ops", "smooth_l1_loss", "smooth_l1_raw",
    "stop_gradient",
    "straight_through",
]
