"""Minimal dense-tensor engine with reverse-mode gradients."""
from . import functional
from .gradcheck import finite_diff_check
from .snapshot import load_tensor, save_tensor
from .tensor import Tensor, as_tensor, is_grad_enabled, no_grad, topological_order

__all__ = [
    "Tensor",
    "as_tensor",
    "finite_diff_check",
    "functional",
    "is_grad_enabled",
    "load_tensor",
    "no_grad",
    "save_tensor",
    "topological_order",
]
