"""
Semantic masks from Grad-CAM or ground truth, and their perturbations.
"""
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from prompt_decoupler.autograd import GradTape, grad_tap
from prompt_decoupler.errors import ContractError, DataError, NumericError, ShapeError

logger = logging.getLogger(__name__)

MASK_MODES = ("binary", "soft")
MASK_SOURCES = ("gradcam", "oracle", "perturbed")
UPSAMPLE_ORDERS = {"bilinear": 1, "nearest": 0}


@dataclass
class SemanticMask:
    """
    h x w foreground map.

    Attributes:
        values: float64 array in [0, 1]; only {0, 1} in binary mode
        mode: "binary" or "soft"
        source: "gradcam", "oracle" or "perturbed"
    """

    values: np.ndarray
    mode: str = "binary"
    source: str = "oracle"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ShapeError(f"a mask is a 2-D map, got shape {self.values.shape}")
        if self.mode not in MASK_MODES:
            raise ContractError(f"mask mode must be one of {MASK_MODES}, got {self.mode}")
        if self.source not in MASK_SOURCES:
            raise ContractError(f"mask source must be one of {MASK_SOURCES}, got {self.source}")
        if self.values.size and (self.values.min() < 0.0 or self.values.max() > 1.0):
            raise ContractError("mask values must lie in [0, 1]")
        if self.mode == "binary" and not np.all((self.values == 0.0) | (self.values == 1.0)):
            raise ContractError("binary mask holds values other than 0 and 1")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    @property
    def foreground_pixels(self) -> int:
        return int(np.count_nonzero(self.values))


@dataclass
class CamMap:
    """
    Grad-CAM of one image.

    Attributes:
        patch: (h/p, w/p) nonnegative map
        pixel: (h, w) map min-max normalized to [0, 1]; zeros when degenerate
        degenerate: The patch map was constant, so no region stands out
    """

    patch: np.ndarray
    pixel: np.ndarray
    degenerate: bool = False

    def threshold(self, beta: float) -> SemanticMask:
        """Binary mask pixel > beta; a degenerate CAM gives the all-ones mask."""
        if self.degenerate:
            return SemanticMask(np.ones_like(self.pixel), "binary", "gradcam")
        return SemanticMask((self.pixel > beta).astype(np.float64), "binary", "gradcam")


def cam_from_activation(
    activation: np.ndarray, gradient: np.ndarray, grid: int, image_size: int, upsample: str = "bilinear"
) -> CamMap:
    """
    Combine a tapped activation and its gradient into a CAM.

    Args:
        activation: (c_I, n) patch activation A
        gradient: (c_I, n) gradient of the class score with respect to A
        grid: Patches per side, n = grid^2
        image_size: Output side length h
        upsample: "bilinear" or "nearest"

    Raises:
        NumericError: If the gradient is not finite
    """
    if activation.shape != gradient.shape or activation.shape[1] != grid * grid:
        raise ShapeError(f"activation {activation.shape} and gradient {gradient.shape} do not match a {grid}x{grid} grid")
    if not np.all(np.isfinite(gradient)):
        raise NumericError("Grad-CAM gradient is not finite")
    patch = np.maximum((gradient * activation).mean(axis=0), 0.0).reshape(grid, grid)
    if upsample not in UPSAMPLE_ORDERS:
        raise ContractError(f"upsample must be one of {sorted(UPSAMPLE_ORDERS)}, got {upsample}")
    pixel = ndimage.zoom(patch, image_size / grid, order=UPSAMPLE_ORDERS[upsample], mode="nearest", grid_mode=True)
    pixel = np.maximum(pixel, 0.0)
    low, high = pixel.min(), pixel.max()
    if high - low <= 1e-12:
        return CamMap(patch, np.zeros_like(pixel), degenerate=True)
    return CamMap(patch, (pixel - low) / (high - low))


class GradCamMasker:
    """
    Batched Grad-CAM over the image encoder's final-block patch activation.

    The score of an image is its similarity to the text feature of its class;
    for multi-label images the similarities of all positive classes are summed.
    """

    def __init__(self, encoder, beta: float = 0.5, upsample: str = "bilinear"):
        if not 0.0 <= beta < 1.0:
            raise ContractError(f"threshold beta must lie in [0, 1), got {beta}")
        if upsample not in UPSAMPLE_ORDERS:
            raise ContractError(f"upsample must be one of {sorted(UPSAMPLE_ORDERS)}, got {upsample}")
        self.encoder = encoder
        self.beta = beta
        self.upsample = upsample

    def cams(self, images: np.ndarray, class_features: np.ndarray, label_sets: Sequence[Sequence[int]], prompts=None) -> List[CamMap]:
        """
        Args:
            images: (b, 3, h, w)
            class_features: (k, d) text features of the foreground classes, treated as constants
            label_sets: Positive classes per image
            prompts: PromptSet used for the forward pass, or None

        Returns:
            One CamMap per image
        """
        images = np.asarray(images, dtype=np.float64)
        if len(label_sets) != len(images):
            raise ShapeError(f"{len(images)} images but {len(label_sets)} label sets")
        class_features = np.asarray(class_features, dtype=np.float64)
        targets = np.zeros((len(images), class_features.shape[1]))
        for row, labels in enumerate(label_sets):
            for label in labels:
                targets[row] += class_features[label]
        detached = prompts.detached() if prompts is not None else None
        with GradTape():
            encoding = self.encoder.encode_image(images, detached, tap=True)
            score = (encoding.features * targets).sum()
            gradient = grad_tap(score, encoding.activation)
        activation = encoding.activation.data
        cfg = self.encoder.config
        maps = [cam_from_activation(activation[i], gradient[i], cfg.grid, cfg.image_size, self.upsample) for i in range(len(images))]
        degenerate = sum(m.degenerate for m in maps)
        if degenerate:
            logger.warning(f"{degenerate} of {len(maps)} CAMs were degenerate, using all-ones masks")
        return maps

    def masks(self, images: np.ndarray, class_features: np.ndarray, label_sets: Sequence[Sequence[int]], prompts=None) -> List[SemanticMask]:
        return [cam.threshold(self.beta) for cam in self.cams(images, class_features, label_sets, prompts)]


def gradcam_mask(image: np.ndarray, label: int, encoder, class_features: np.ndarray, prompts=None,
                 beta: float = 0.5, upsample: str = "bilinear") -> SemanticMask:
    """Grad-CAM mask of a single (3, h, w) image for class label."""
    return GradCamMasker(encoder, beta, upsample).masks(np.asarray(image)[None], class_features, [[label]], prompts)[0]


def oracle_mask(sample) -> SemanticMask:
    """
    The generator's ground-truth mask (union of all objects).

    Raises:
        DataError: If the sample carries no mask
    """
    gt_mask = getattr(sample, "gt_mask", None)
    if gt_mask is None:
        raise DataError(f"sample {getattr(sample, 'sample_id', '?')} has no ground-truth mask")
    return SemanticMask((np.asarray(gt_mask) > 0).astype(np.float64), "binary", "oracle")


def erase_mask(mask: SemanticMask, rate: float, grid: int = 8, seed: int = 0) -> SemanticMask:
    """
    Zero floor(rate * F) of the F grid cells that hold foreground.

    The mask is split into grid x grid cells; the erased cells are a prefix of a
    seeded permutation, so for a fixed seed a higher rate erases a superset.

    Raises:
        ContractError: If rate is outside [0, 1], the mask is soft, or grid does not divide it
    """
    if not 0.0 <= rate <= 1.0:
        raise ContractError(f"erase rate must lie in [0, 1], got {rate}")
    if mask.mode != "binary":
        raise ContractError("only binary masks can be erased")
    h, w = mask.shape
    if grid < 1 or h % grid or w % grid:
        raise ContractError(f"grid {grid} does not divide a {h}x{w} mask")
    ch, cw = h // grid, w // grid
    cells = mask.values.reshape(grid, ch, grid, cw).transpose(0, 2, 1, 3)
    foreground = np.flatnonzero(cells.reshape(grid * grid, -1).max(axis=1) > 0)
    count = int(np.floor(rate * len(foreground) + 1e-9))
    values = mask.values.copy()
    if count:
        order = np.random.default_rng(seed).permutation(len(foreground))
        for cell in foreground[order[:count]]:
            row, col = divmod(int(cell), grid)
            values[row * ch:(row + 1) * ch, col * cw:(col + 1) * cw] = 0.0
    return SemanticMask(values, "binary", "perturbed")


def gaussian_kernel(kernel_size: Tuple[int, int], sigma: float) -> np.ndarray:
    """
    Normalized separable Gaussian kernel.

    Args:
        kernel_size: (width, height), both odd
        sigma: Standard deviation in pixels, shared by both axes
    """
    width, height = kernel_size
    if width < 1 or height < 1 or width % 2 == 0 or height % 2 == 0:
        raise ContractError(f"kernel sizes must be odd, got {kernel_size}")
    if sigma <= 0:
        raise ContractError(f"sigma must be positive, got {sigma}")
    xs = np.arange(width) - width // 2
    ys = np.arange(height) - height // 2
    kx = np.exp(-0.5 * (xs / sigma) ** 2)
    ky = np.exp(-0.5 * (ys / sigma) ** 2)
    kernel = np.outer(ky / ky.sum(), kx / kx.sum())
    return kernel


def gaussian_blur(values: np.ndarray, kernel_size: Tuple[int, int] = (5, 9), sigma: float = 1.0) -> np.ndarray:
    """Blur a (h, w) map or every channel of a (c, h, w) image, mirroring at the borders."""
    kernel = gaussian_kernel(kernel_size, sigma)
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 2:
        return ndimage.correlate(values, kernel, mode="mirror")
    if values.ndim == 3:
        return np.stack([ndimage.correlate(channel, kernel, mode="mirror") for channel in values])
    raise ShapeError(f"can only blur 2-D maps or 3-D images, got shape {values.shape}")


def sample_sigma(sigma_range: Tuple[float, float], seed: Optional[int]) -> float:
    low, high = sigma_range
    if not 0 < low <= high:
        raise ContractError(f"sigma range must satisfy 0 < low <= high, got {sigma_range}")
    return float(np.random.default_rng(seed).uniform(low, high))
