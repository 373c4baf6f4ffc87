"""Dense-tensor numeric core with reverse-mode differentiation."""
from prompt_decoupler.autograd.functional import cosine_similarity, finite_diff_check, l1_distance, l2_normalize
from prompt_decoupler.autograd.optim import SGD, cosine_lr
from prompt_decoupler.autograd.tensor import (
    GradTape,
    Gradients,
    Tensor,
    as_tensor,
    backward,
    concat,
    grad_tap,
    layer_norm,
    log_softmax,
    no_grad,
    softmax,
    stack_rows,
)

__all__ = [
    "GradTape",
    "Gradients",
    "SGD",
    "Tensor",
    "as_tensor",
    "backward",
    "concat",
    "cosine_lr",
    "cosine_similarity",
    "finite_diff_check",
    "grad_tap",
    "l1_distance",
    "l2_normalize",
    "layer_norm",
    "log_softmax",
    "no_grad",
    "softmax",
    "stack_rows",
]
