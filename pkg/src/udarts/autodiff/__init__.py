"""Reverse-mode automatic differentiation over dense float64 arrays."""

from . import ops
from .fdcheck import finite_diff_grad, max_rel_err
from .graph import Graph, evaluate, value_and_grad
from .tensor import NonFiniteError, Tape, TapeError, Tensor

__all__ = [
    "Graph", "NonFiniteError", "Tape", "TapeError", "Tensor", "evaluate",
    "finite_diff_grad", "max_rel_err", "ops", "value_and_grad",
]
