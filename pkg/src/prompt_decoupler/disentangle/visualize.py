"""
CAM heatmaps as portable graymaps and mask overlays as portable pixmaps.
"""
import io
import logging
from pathlib import Path
from typing import Union

import numpy as np
from PIL import Image

from prompt_decoupler.errors import ShapeError
from prompt_decoupler.scenedata.storage import write_atomic

logger = logging.getLogger(__name__)

OVERLAY_COLOR = (255, 0, 0)
OVERLAY_ALPHA = 0.45


def _encode(image: Image.Image) -> bytes:
    buffer = io.BytesIO()
    image.save(buffer, format="PPM")
    return buffer.getvalue()


def heatmap_bytes(pixel_map: np.ndarray) -> bytes:
    """Binary PGM (P5) of a [0, 1] map scaled to 0..255."""
    pixel_map = np.asarray(pixel_map, dtype=np.float64)
    if pixel_map.ndim != 2:
        raise ShapeError(f"heatmaps are 2-D, got shape {pixel_map.shape}")
    gray = np.round(np.clip(pixel_map, 0.0, 1.0) * 255.0).astype(np.uint8)
    return _encode(Image.fromarray(gray))


def overlay_bytes(image: np.ndarray, mask: np.ndarray) -> bytes:
    """Binary PPM (P6) of a (3, h, w) image with the mask's foreground tinted."""
    image = np.asarray(image, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if image.ndim != 3 or image.shape[1:] != mask.shape:
        raise ShapeError(f"mask {mask.shape} does not cover image {image.shape}")
    rgb = image.transpose(1, 2, 0) * 255.0
    tint = np.asarray(OVERLAY_COLOR, dtype=np.float64)
    weight = OVERLAY_ALPHA * mask[..., None]
    blended = np.round(np.clip(rgb * (1.0 - weight) + tint * weight, 0.0, 255.0)).astype(np.uint8)
    return _encode(Image.fromarray(blended))


def write_heatmap(path: Union[str, Path], pixel_map: np.ndarray) -> Path:
    path = Path(path)
    write_atomic(path, heatmap_bytes(pixel_map))
    logger.debug(f"Wrote heatmap {path}")
    return path


def write_overlay(path: Union[str, Path], image: np.ndarray, mask: np.ndarray) -> Path:
    path = Path(path)
    write_atomic(path, overlay_bytes(image, mask))
    logger.debug(f"Wrote overlay {path}")
    return path
