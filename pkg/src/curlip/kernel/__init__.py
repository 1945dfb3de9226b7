"""Minimal numpy tensor engine: primitives, gradients, AdamW, checkpoints."""

from . import functional
from .checkpoint import load as load_checkpoint
from .checkpoint import save as save_checkpoint
from .gradcheck import GradCheckReport, grad_check
from .optim import adamw_step
from .state import ModelState, Param
from .tensor import Tensor, no_grad

__all__ = [
    "functional",
    "GradCheckReport",
    "grad_check",
    "adamw_step",
    "ModelState",
    "Param",
    "Tensor",
    "no_grad",
    "load_checkpoint",
    "save_checkpoint",
]
