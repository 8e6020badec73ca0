"""Minimal dense-tensor neural core with reverse-mode differentiation."""

from . import autodiff
from .autodiff import Tape, Tensor, const, parameter, zero_grads
from .encoder import EncoderConfig, encoder_forward, init_encoder_params, truncated_normal
from .optim import Adam, GradCheckReport, clip_global_norm, gradient_check

__all__ = [
    "autodiff",
    "Tape",
    "Tensor",
    "const",
    "parameter",
    "zero_grads",
    "EncoderConfig",
    "encoder_forward",
    "init_encoder_params",
    "truncated_normal",
    "Adam",
    "GradCheckReport",
    "clip_global_norm",
    "gradient_check",
]
