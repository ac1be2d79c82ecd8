from .ops import ConvSpec
from .tensor import NonFiniteError, Tensor, is_grad_enabled, no_grad

__all__ = ["ConvSpec", "NonFiniteError", "Tensor", "is_grad_enabled", "no_grad"]
