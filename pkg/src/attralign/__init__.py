"""Attribute-guided dual-branch attention for few-shot recognition.

A small, self-contained float64 stack: reverse-mode autodiff, a Conv-4-style
backbone with a channel+spatial attention module in two branches (one guided
by per-class attribute vectors, one purely visual), metric heads, an
attention-alignment loss that distills the guided branch into the visual one,
and an episodic training/evaluation engine with synthetic data tooling.
"""

from . import autodiff
from .autodiff import Tensor, finite_diff_check, no_grad
from .errors import (
    CapacityError,
    ConfigError,
    ContractViolation,
    DataFormatError,
    DivergenceError,
    ShapeError,
)

__version__ = "0.1.0"
