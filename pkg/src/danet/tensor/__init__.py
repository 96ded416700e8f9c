from .core import (
    ContractError,
    GradStore,
    NonFiniteError,
    ParamError,
    ShapeError,
    Tape,
    Tensor,
    backward,
    current_tape,
    no_grad,
    recording,
)
from . import ops
from .rngtools import sample_normal, sample_uniform, stream

__all__ = [
    "ContractError",
    "GradStore",
    "NonFiniteError",
    "ParamError",
    "ShapeError",
    "Tape",
    "Tensor",
    "backward",
    "current_tape",
    "no_grad",
    "recording",
    "ops",
    "sample_normal",
    "sample_uniform",
    "stream",
]
