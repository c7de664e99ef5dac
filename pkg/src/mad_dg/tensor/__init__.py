"""Minimal reverse-mode autodiff over float64 numpy arrays."""
from . import kernels, ops
from .checkpoint import CheckpointError, load_into, read_checkpoint, save_checkpoint
from .gradcheck import finite_difference_check, kink_coordinates, numeric_grad
from .init import tensor_new
from .optim import ROLES, ParamGroup, check_partition, sgd_update
from .tensor import (NonFiniteError, Tape, TapeError, Tensor, TensorError, current_tape, no_grad,
                     reset_tape)


def backward_and_grad(loss: Tensor) -> None:
    """Populate .grad on every leaf that requires it; consumes the loss's tape."""
    loss.backward()


__all__ = [
    "Tensor", "Tape", "TensorError", "TapeError", "NonFiniteError", "no_grad", "current_tape",
    "reset_tape", "tensor_new", "ops", "kernels", "ParamGroup", "ROLES", "check_partition",
    "sgd_update", "finite_difference_check", "kink_coordinates", "numeric_grad", "backward_and_grad",
    "save_checkpoint", "read_checkpoint", "load_into", "CheckpointError",
]
