"""Float64 tensors with reverse-mode, higher-order differentiation."""

from . import ops
from .grad import finite_diff, grad, relative_error
from .ops import forward_op
from .tensor import Graph, Node, Tensor, as_tensor, is_grad_enabled, no_grad, set_grad_enabled

__all__ = [
    "Graph",
    "Node",
    "Tensor",
    "as_tensor",
    "finite_diff",
    "forward_op",
    "grad",
    "is_grad_enabled",
    "no_grad",
    "ops",
    "relative_error",
    "set_grad_enabled",
]
