"""
Stochastic gradient descent over leaf tensors, with learning-rate schedules.
"""
import logging
import math
from typing import Dict, List, Sequence

import numpy as np

from prompt_decoupler.autograd.tensor import Tensor
from prompt_decoupler.errors import ContractError

logger = logging.getLogger(__name__)


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    """Cosine decay from base_lr to zero over total_steps."""
    if total_steps <= 0:
        return base_lr
    progress = min(step, total_steps) / total_steps
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * progress))


class SGD:
    """
    Plain SGD with an optional momentum buffer.

    Parameters are updated in place; tensors without a gradient are skipped.
    """

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        if lr <= 0:
            raise ContractError(f"learning rate must be positive, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ContractError(f"momentum must lie in [0, 1), got {momentum}")
        self.params: List[Tensor] = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity: Dict[int, np.ndarray] = {}

    def step(self) -> None:
        for param in self.params:
            if param.grad is None:
                continue
            grad = param.grad
            if self.weight_decay:
                grad = grad + self.weight_decay * param.data
            if self.momentum:
                velocity = self._velocity.get(param.node_id)
                velocity = grad.copy() if velocity is None else self.momentum * velocity + grad
                self._velocity[param.node_id] = velocity
                grad = velocity
            param.data -= self.lr * grad

    def zero_grad(self) -> None:
        for param in self.params:
            param.grad = None
