"""
Procedural background textures, one per background class name.

Each of the 25 background classes maps to a texture family and a palette so the
background of every scene carries a recoverable identity.
"""
import logging
from typing import Dict, NamedTuple, Tuple

import numpy as np
from scipy.ndimage import zoom

logger = logging.getLogger(__name__)

BACKGROUND_NAMES: Tuple[str, ...] = (
    "ground", "land", "grass", "tree", "building", "wall", "sky", "lake", "water",
    "river", "sea", "railway", "railroad", "keyboard", "helmet", "cloud", "house",
    "mountain", "ocean", "road", "rock", "street", "valley", "bridge", "sign",
)


class TextureStyle(NamedTuple):
    family: str
    primary: Tuple[int, int, int]
    secondary: Tuple[int, int, int]
    frequency: float


TEXTURE_STYLES: Dict[str, TextureStyle] = {
    "ground": TextureStyle("blotch", (120, 90, 60), (95, 70, 45), 4.0),
    "land": TextureStyle("blotch", (150, 130, 80), (120, 105, 60), 2.0),
    "grass": TextureStyle("speckle", (60, 150, 60), (30, 110, 30), 0.35),
    "tree": TextureStyle("speckle", (30, 90, 40), (70, 50, 30), 0.5),
    "building": TextureStyle("bricks", (170, 170, 175), (110, 110, 120), 8.0),
    "wall": TextureStyle("bricks", (180, 100, 70), (220, 210, 200), 4.0),
    "sky": TextureStyle("gradient", (110, 170, 240), (210, 230, 255), 1.0),
    "lake": TextureStyle("waves", (50, 110, 150), (80, 140, 170), 3.0),
    "water": TextureStyle("waves", (40, 90, 200), (90, 140, 230), 6.0),
    "river": TextureStyle("waves", (70, 120, 110), (110, 150, 140), 9.0),
    "sea": TextureStyle("waves", (20, 60, 130), (40, 100, 170), 4.5),
    "railway": TextureStyle("stripes", (90, 80, 70), (160, 150, 140), 8.0),
    "railroad": TextureStyle("stripes", (60, 60, 60), (140, 100, 60), 5.0),
    "keyboard": TextureStyle("checker", (40, 40, 45), (200, 200, 205), 8.0),
    "helmet": TextureStyle("radial", (230, 200, 40), (250, 240, 200), 2.0),
    "cloud": TextureStyle("blotch", (225, 225, 235), (190, 195, 210), 3.0),
    "house": TextureStyle("bricks", (200, 160, 120), (120, 70, 50), 6.0),
    "mountain": TextureStyle("gradient", (110, 100, 110), (230, 230, 240), -1.0),
    "ocean": TextureStyle("waves", (10, 40, 90), (30, 70, 120), 2.0),
    "road": TextureStyle("stripes", (70, 70, 75), (230, 230, 120), 2.0),
    "rock": TextureStyle("speckle", (130, 125, 120), (90, 85, 80), 0.5),
    "street": TextureStyle("checker", (100, 100, 105), (140, 140, 145), 4.0),
    "valley": TextureStyle("gradient", (70, 140, 70), (150, 120, 80), 2.0),
    "bridge": TextureStyle("diagonal", (150, 80, 50), (80, 80, 90), 6.0),
    "sign": TextureStyle("radial", (200, 30, 30), (245, 245, 245), 5.0),
}


def _blend(style: TextureStyle, weight: np.ndarray) -> np.ndarray:
    primary = np.asarray(style.primary, dtype=np.float64)
    secondary = np.asarray(style.secondary, dtype=np.float64)
    return primary[None, None, :] * (1.0 - weight[..., None]) + secondary[None, None, :] * weight[..., None]


def render_texture(name: str, size: int, rng: np.random.Generator) -> np.ndarray:
    """
    Render the texture of a background class.

    Args:
        name: One of BACKGROUND_NAMES
        size: Side length in pixels
        rng: Source of per-sample variation (phase, jitter)

    Returns:
        uint8 array of shape (size, size, 3)
    """
    style = TEXTURE_STYLES[name]
    yy, xx = np.mgrid[0:size, 0:size] / float(size)
    phase = rng.uniform(0.0, 2.0 * np.pi)

    if style.family == "gradient":
        axis = yy if style.frequency > 0 else 1.0 - yy
        weight = np.clip(axis * abs(style.frequency), 0.0, 1.0)
    elif style.family == "waves":
        weight = 0.5 + 0.5 * np.sin(2.0 * np.pi * style.frequency * yy + 1.5 * np.sin(2.0 * np.pi * xx) + phase)
    elif style.family == "stripes":
        weight = (np.sin(2.0 * np.pi * style.frequency * xx + phase) > 0).astype(np.float64)
    elif style.family == "diagonal":
        weight = (np.sin(2.0 * np.pi * style.frequency * (xx + yy) + phase) > 0).astype(np.float64)
    elif style.family == "checker":
        cells = np.floor(xx * style.frequency) + np.floor(yy * style.frequency)
        weight = (cells % 2).astype(np.float64)
    elif style.family == "bricks":
        rows = np.floor(yy * style.frequency)
        shifted = xx * style.frequency / 2.0 + 0.5 * (rows % 2)
        mortar = (np.abs(yy * style.frequency - np.round(yy * style.frequency)) < 0.08) | (
            np.abs(shifted - np.round(shifted)) < 0.05
        )
        weight = mortar.astype(np.float64)
    elif style.family == "radial":
        radius = np.hypot(xx - 0.5, yy - 0.5)
        weight = 0.5 + 0.5 * np.cos(2.0 * np.pi * style.frequency * radius + phase)
    elif style.family == "speckle":
        weight = (rng.random((size, size)) < style.frequency).astype(np.float64)
    elif style.family == "blotch":
        coarse = max(2, int(round(style.frequency)))
        field = rng.random((coarse, coarse))
        weight = np.clip(zoom(field, size / coarse, order=1, grid_mode=True, mode="nearest"), 0.0, 1.0)
        weight = weight[:size, :size]
    else:
        raise ValueError(f"Unknown texture family {style.family} for {name}")

    jitter = rng.normal(0.0, 6.0, size=(size, size, 3))
    pixels = _blend(style, weight) + jitter
    return np.clip(np.round(pixels), 0, 255).astype(np.uint8)
