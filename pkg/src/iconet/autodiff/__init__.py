"""Minimal tensor engine: tape-based autodiff, Adam, checkpoints."""

from . import ops
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import check_gradients, check_gradients_joint, compare_gradients, numerical_grad, relative_error
from .optim import Adam, AdamState, adam_step
from .tensor import (
    FAULTS,
    NumericError,
    Tape,
    Tensor,
    as_tensor,
    backward,
    checked,
    default_dtype,
    get_default_dtype,
    is_checked,
    is_grad_enabled,
    make_result,
    no_grad,
    set_checked,
    set_default_dtype,
)
