"""Pixel-space unified transformer at desk scale: tokenization, hybrid attention,
flow-matching training, Euler sampling, and few-step distillation on a
hand-written reverse-mode autodiff core."""

from .autodiff import Tape, Tensor, backward, finite_difference_check
from .model import ModelConfig, forward_model, init_params
from .tokens import SegmentKind, TokenSequence

__all__ = [
    "ModelConfig", "SegmentKind", "Tape", "Tensor", "TokenSequence",
    "backward", "finite_difference_check", "forward_model", "init_params",
]
__version__ = "0.1.0"
