"""Minimal dense-tensor math with reverse-mode gradients."""

from .functional import LAYER_NORM_EPS, attention, layer_norm, silu, softmax_lastaxis
from .gradcheck import grad_check
from .rng import RngState
from .serialize import load_tensor, save_tensor
from .tensor import (
    Tensor,
    concat,
    default_dtype,
    no_grad,
    precision,
    set_default_dtype,
    stack,
)

__all__ = [
    "LAYER_NORM_EPS",
    "RngState",
    "Tensor",
    "attention",
    "concat",
    "default_dtype",
    "grad_check",
    "layer_norm",
    "load_tensor",
    "no_grad",
    "precision",
    "save_tensor",
    "set_default_dtype",
    "silu",
    "softmax_lastaxis",
    "stack",
]
