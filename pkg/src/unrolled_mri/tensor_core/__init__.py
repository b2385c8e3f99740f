"""Complex tensors, the gradient tape, primitive ops, and activation accounting."""

from .tape import (
    Parameter,
    Primitive,
    PRIMITIVES,
    register_primitive,
    ShapeTape,
    ShapeTensor,
    Tape,
    Tensor,
)
from . import ops

__all__ = [
    "Parameter",
    "Primitive",
    "PRIMITIVES",
    "register_primitive",
    "ShapeTape",
    "ShapeTensor",
    "Tape",
    "Tensor",
    "ops",
]
