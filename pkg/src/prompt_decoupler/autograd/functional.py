"""
Feature-space functions built on the tensor core, and the finite-difference check.
"""
import logging
from typing import Callable, List, Optional, Sequence, Union

import numpy as np

from prompt_decoupler.autograd.tensor import ArrayLike, Tensor, as_tensor, backward, no_grad
from prompt_decoupler.errors import ContractError, DomainError, NumericError, ShapeError

logger = logging.getLogger(__name__)


def l2_normalize(x: ArrayLike, axis: int = -1) -> Tensor:
    """Scale x to unit L2 norm along axis."""
    x = as_tensor(x)
    norm = (x * x).sum(axis=axis, keepdims=True).sqrt()
    return x / norm


def cosine_similarity(a: ArrayLike, b: ArrayLike) -> Tensor:
    """
    Cosine similarity along the last axis.

    Args:
        a: Feature vector, or a batch of row vectors
        b: Feature vector(s) with the same shape as a

    Returns:
        Similarity in [-1, 1], one value per row

    Raises:
        ShapeError: If the shapes differ
        DomainError: If any input row has zero norm
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"cosine_similarity needs equal shapes, got {a.shape} and {b.shape}")
    if np.any(np.linalg.norm(a.data, axis=-1) == 0.0) or np.any(np.linalg.norm(b.data, axis=-1) == 0.0):
        raise DomainError("cosine_similarity is undefined for a zero-norm vector")
    return (l2_normalize(a) * l2_normalize(b)).sum(axis=-1)


def l1_distance(a: ArrayLike, b: ArrayLike) -> Tensor:
    """
    Manhattan distance along the last axis.

    Raises:
        ShapeError: If the shapes differ
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"l1_distance needs equal lengths, got {a.shape} and {b.shape}")
    return (a - b).abs().sum(axis=-1)


def finite_diff_check(
    f: Callable[[List[Tensor]], Tensor],
    theta: Union[np.ndarray, Sequence[np.ndarray]],
    eps: float = 1e-6,
    max_coords: Optional[int] = None,
    seed: int = 0,
) -> float:
    """
    Compare the analytic gradient of f against central differences.

    Args:
        f: Maps a list of parameter tensors to a scalar tensor
        theta: Point of evaluation, one array per parameter
        eps: Central-difference step
        max_coords: If set, check a seeded random subset of this many coordinates
            per parameter instead of all of them
        seed: Seed for the coordinate subset

    Returns:
        max over checked coordinates of |analytic - numeric| / max(1, |numeric|)

    Raises:
        ContractError: If eps is not positive
        NumericError: If f is not finite at a sampled point
    """
    if eps <= 0:
        raise ContractError(f"finite difference step must be positive, got {eps}")
    arrays = [np.array(theta, dtype=np.float64)] if isinstance(theta, np.ndarray) else [
        np.array(t, dtype=np.float64) for t in theta
    ]

    leaves = [Tensor(arr, requires_grad=True) for arr in arrays]
    root = f(leaves)
    _require_finite(root.item())
    grads = backward(root)
    analytic = [grads[leaf] for leaf in leaves]

    def evaluate(values: List[np.ndarray]) -> float:
        with no_grad():
            value = f([Tensor(v) for v in values]).item()
        _require_finite(value)
        return value

    rng = np.random.default_rng(seed)
    worst = 0.0
    for position, arr in enumerate(arrays):
        coords = np.arange(arr.size)
        if max_coords is not None and arr.size > max_coords:
            coords = np.sort(rng.choice(arr.size, size=max_coords, replace=False))
        for flat in coords:
            index = np.unravel_index(flat, arr.shape)
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[position][index] += eps
            minus[position][index] -= eps
            numeric = (evaluate(plus) - evaluate(minus)) / (2.0 * eps)
            error = abs(analytic[position][index] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, error)
    logger.debug(f"finite_diff_check over {len(arrays)} parameter(s): max relative error {worst:.3e}")
    return worst


def _require_finite(value: float) -> None:
    if not np.isfinite(value):
        raise NumericError(f"function value is not finite: {value}")
