"""Vanilla and attention encoder-decoder image captioners built on a small autodiff core."""

from .tensor import Tape, Tensor, backward, gradient_check

__all__ = ["Tape", "Tensor", "backward", "gradient_check"]
__version__ = "0.1.0"
