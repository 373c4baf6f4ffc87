"""
Visual triplets (I, I_f, I_b) built from an image and a semantic mask.
"""
import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from prompt_decoupler.disentangle.masks import SemanticMask, gaussian_blur, sample_sigma
from prompt_decoupler.errors import ShapeError

logger = logging.getLogger(__name__)


@dataclass
class VisualTriplet:
    """
    Original image with its foreground and background parts, each (3, h, w).

    Hard fill gives I_f = M * I and I_b = (1 - M) * I, the mask shared across
    channels; `blur_mask` fills the other region with a blurred copy instead.
    """

    original: np.ndarray
    foreground: np.ndarray
    background: np.ndarray
    mask: SemanticMask

    def __post_init__(self):
        if not self.original.shape == self.foreground.shape == self.background.shape:
            raise ShapeError(
                f"triplet parts differ in shape: {self.original.shape}, {self.foreground.shape}, {self.background.shape}"
            )


def make_triplet(image: np.ndarray, mask: SemanticMask) -> VisualTriplet:
    """
    Split an image with a mask.

    Raises:
        ShapeError: If the mask is not h x w for a (3, h, w) image
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[1:] != mask.shape:
        raise ShapeError(f"mask {mask.shape} does not cover image {image.shape}")
    weights = mask.values[None, :, :]
    return VisualTriplet(image, image * weights, image * (1.0 - weights), mask)


def blur_mask(
    image: np.ndarray,
    mask: SemanticMask,
    kernel_size: Tuple[int, int] = (5, 9),
    sigma_range: Tuple[float, float] = (0.1, 1.0),
    seed: Optional[int] = None,
) -> VisualTriplet:
    """
    Triplet that blurs the other region instead of zeroing it.

    With G the Gaussian-blurred image, I_f = M * I + (1 - M) * G keeps the
    foreground exact over a blurred background, and I_b = (1 - M) * I + M * G
    keeps the background exact over a blurred foreground. Sigma is drawn
    uniformly from sigma_range.

    Raises:
        ShapeError: If the mask is not h x w for a (3, h, w) image
        ContractError: On even kernel sizes or an invalid sigma range
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[1:] != mask.shape:
        raise ShapeError(f"mask {mask.shape} does not cover image {image.shape}")
    sigma = sample_sigma(sigma_range, seed)
    blurred = gaussian_blur(image, kernel_size, sigma)
    weights = mask.values[None, :, :]
    foreground = weights * image + (1.0 - weights) * blurred
    background = (1.0 - weights) * image + weights * blurred
    return VisualTriplet(image, foreground, background, mask)
