from . import functional
from .core import DTYPES, ShapeError, Tape, Tensor, as_tensor, grad_enabled, make_result, no_grad
from .gradcheck import grad_check, numerical_grad

__all__ = [
    "DTYPES",
    "ShapeError",
    "Tape",
    "Tensor",
    "as_tensor",
    "functional",
    "grad_check",
    "grad_enabled",
    "make_result",
    "no_grad",
    "numerical_grad",
]
