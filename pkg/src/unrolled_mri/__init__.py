"""Memory-efficient training strategies for unrolled MRI reconstruction.

A complex-valued autodiff tape with exact activation accounting, the
accelerated-MRI sensing model, unrolled PGD/MoDL networks, four training
strategies (end-to-end backprop, gradient checkpointing, invertible backward,
and greedy module-wise training with an optional multi-worker executor), a
compressed-sensing baseline, and a synthetic desk-scale benchmark harness.
"""

from . import (
    binio,
    cs_baseline,
    data_metrics,
    errors,
    mri_physics,
    tensor_core,
    train_strategies,
    unrolled_nets,
)
from .tensor_core import Parameter, Tape, Tensor, ops

__all__ = [
    "binio",
    "cs_baseline",
    "data_metrics",
    "errors",
    "mri_physics",
    "tensor_core",
    "train_strategies",
    "unrolled_nets",
    "Parameter",
    "Tape",
    "Tensor",
    "ops",
]

__version__ = "0.1.0"
