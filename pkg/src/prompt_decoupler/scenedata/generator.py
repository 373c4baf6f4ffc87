"""
ShapeScenes generator: textured backgrounds with rasterized foreground shapes.

Every sample carries its ground-truth foreground mask and the identity of its
background texture, so masks and background pseudo-labels can be checked exactly.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, ImageDraw

from prompt_decoupler.errors import ContractError, DataError
from prompt_decoupler.scenedata.textures import BACKGROUND_NAMES, render_texture
from prompt_decoupler.scenedata.tokenizer import COLORS, class_catalog, class_names

logger = logging.getLogger(__name__)

MIN_FOREGROUND_FRACTION = 0.01
MAX_FOREGROUND_FRACTION = 0.60
MAX_PLACEMENT_ATTEMPTS = 50

_SPLIT_CODES = {"train": 0, "test": 1, "pretrain": 2, "background": 3}


@dataclass
class DatasetSpec:
    """
    Parameters of a ShapeScenes dataset.

    Attributes:
        num_classes: Foreground classes k (shape/color pairs)
        train_per_class: Samples per class in the training pool
        test_per_class: Samples per class in the held-out test split
        image_size: Side length h = w in pixels
        multi_object: Place up to max_objects distinct classes per image
        max_objects: Upper bound on objects in multi-object scenes
        num_background_classes: Prefix of the background names used for textures
        split_seed: Seed of the base/novel partition
    """

    num_classes: int = 10
    train_per_class: int = 32
    test_per_class: int = 20
    image_size: int = 64
    multi_object: bool = False
    max_objects: int = 3
    num_background_classes: int = 25
    split_seed: int = 0

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ContractError(f"a dataset needs at least 2 classes, got {self.num_classes}")
        class_catalog(self.num_classes)
        if self.train_per_class < 1 or self.test_per_class < 1:
            raise ContractError("samples per class must be positive")
        if self.image_size < 8:
            raise ContractError(f"image size {self.image_size} is too small to place shapes")
        if not 1 <= self.num_background_classes <= len(BACKGROUND_NAMES):
            raise ContractError(f"num_background_classes must lie in [1, {len(BACKGROUND_NAMES)}]")
        if self.multi_object and not 1 <= self.max_objects <= min(3, self.num_classes):
            raise ContractError(f"max_objects must lie in [1, 3], got {self.max_objects}")

    @property
    def class_names(self) -> List[str]:
        return class_names(self.num_classes)


@dataclass
class SceneSample:
    """
    One generated scene.

    Attributes:
        sample_id: Unique id within the dataset
        image: float64 array (3, h, w) with values k/255
        labels: Foreground class indices, primary class first
        gt_mask: uint8 array (h, w) of {0, 1}; union of all objects
        bg_class: Index into the background names
        seed: Provenance seed the sample was generated from
        split: "train", "test", "pretrain" or "background"
    """

    sample_id: int
    image: np.ndarray
    labels: Tuple[int, ...]
    gt_mask: Optional[np.ndarray]
    bg_class: int
    seed: int
    split: str = "train"

    @property
    def label(self) -> int:
        return self.labels[0] if self.labels else -1


@dataclass
class SceneDataset:
    spec: DatasetSpec
    train: List[SceneSample] = field(default_factory=list)
    test: List[SceneSample] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.train) + len(self.test)

    def samples(self) -> List[SceneSample]:
        return self.train + self.test


def _polygon(center: Tuple[float, float], radius: float, sides: int, rotation: float) -> List[Tuple[float, float]]:
    cx, cy = center
    return [
        (cx + radius * math.cos(rotation + 2.0 * math.pi * i / sides), cy + radius * math.sin(rotation + 2.0 * math.pi * i / sides))
        for i in range(sides)
    ]


def _star(center: Tuple[float, float], radius: float, rotation: float) -> List[Tuple[float, float]]:
    cx, cy = center
    points = []
    for i in range(10):
        r = radius if i % 2 == 0 else radius * 0.45
        angle = rotation + math.pi * i / 5.0
        points.append((cx + r * math.cos(angle), cy + r * math.sin(angle)))
    return points


def _rotated_rect(center, half_w, half_h, rotation) -> List[Tuple[float, float]]:
    cx, cy = center
    c, s = math.cos(rotation), math.sin(rotation)
    corners = [(-half_w, -half_h), (half_w, -half_h), (half_w, half_h), (-half_w, half_h)]
    return [(cx + x * c - y * s, cy + x * s + y * c) for x, y in corners]


def rasterize_shape(shape: str, size: int, center: Tuple[float, float], radius: float, rotation: float) -> np.ndarray:
    """
    Rasterize one shape to a binary mask with Pillow.

    Returns:
        uint8 array (size, size) of {0, 1}
    """
    canvas = Image.new("L", (size, size), 0)
    draw = ImageDraw.Draw(canvas)
    cx, cy = center
    box = (cx - radius, cy - radius, cx + radius, cy + radius)
    if shape == "disk":
        draw.ellipse(box, fill=1)
    elif shape == "square":
        draw.polygon(_polygon(center, radius, 4, rotation + math.pi / 4.0), fill=1)
    elif shape == "triangle":
        draw.polygon(_polygon(center, radius, 3, rotation), fill=1)
    elif shape == "diamond":
        draw.polygon(_rotated_rect(center, radius * 0.55, radius, rotation), fill=1)
    elif shape == "cross":
        draw.polygon(_rotated_rect(center, radius, radius * 0.3, rotation), fill=1)
        draw.polygon(_rotated_rect(center, radius * 0.3, radius, rotation), fill=1)
    elif shape == "ring":
        draw.ellipse(box, fill=1)
        inner = radius * 0.55
        draw.ellipse((cx - inner, cy - inner, cx + inner, cy + inner), fill=0)
    elif shape == "star":
        draw.polygon(_star(center, radius, rotation), fill=1)
    elif shape == "hexagon":
        draw.polygon(_polygon(center, radius, 6, rotation), fill=1)
    elif shape == "bar":
        draw.polygon(_rotated_rect(center, radius, radius * 0.28, rotation), fill=1)
    elif shape == "crescent":
        draw.ellipse(box, fill=1)
        dx, dy = radius * 0.5 * math.cos(rotation), radius * 0.5 * math.sin(rotation)
        draw.ellipse((cx - radius + dx, cy - radius + dy, cx + radius + dx, cy + radius + dy), fill=0)
    else:
        raise ValueError(f"Unknown shape {shape}")
    return np.asarray(canvas, dtype=np.uint8)


class SceneGenerator:
    """
    Generates ShapeScenes datasets deterministically from a seed.

    Each sample derives its own seed from (seed, split, index), so samples can be
    produced independently and in any order.
    """

    def __init__(self, spec: DatasetSpec):
        spec.validate()
        self.spec = spec
        self.catalog = class_catalog(spec.num_classes)
        self.background_names = BACKGROUND_NAMES[: spec.num_background_classes]

    def generate(self, seed: int) -> SceneDataset:
        """
        Generate the stratified training pool and test split.

        Args:
            seed: Dataset seed

        Returns:
            SceneDataset with train_per_class and test_per_class samples per class
        """
        spec = self.spec
        dataset = SceneDataset(spec=spec)
        next_id = 0
        for split, per_class, target in (("train", spec.train_per_class, dataset.train), ("test", spec.test_per_class, dataset.test)):
            for cls in range(spec.num_classes):
                for j in range(per_class):
                    index = cls * per_class + j
                    target.append(self.sample(seed, split, index, cls, next_id))
                    next_id += 1
        logger.info(
            f"Generated ShapeScenes: {len(dataset.train)} train / {len(dataset.test)} test samples, "
            f"{spec.num_classes} classes, multi_object={spec.multi_object}"
        )
        return dataset

    def sample(self, seed: int, split: str, index: int, cls: int, sample_id: int) -> SceneSample:
        """Generate a single scene whose primary foreground class is cls."""
        sample_seed = int(np.random.SeedSequence([seed, _SPLIT_CODES[split], index]).generate_state(1)[0])
        rng = np.random.default_rng(sample_seed)
        size = self.spec.image_size
        bg_class = int(rng.integers(len(self.background_names)))
        background = render_texture(self.background_names[bg_class], size, rng)

        labels = [cls]
        if self.spec.multi_object and self.spec.max_objects > 1:
            extra = int(rng.integers(0, self.spec.max_objects))
            others = [c for c in range(self.spec.num_classes) if c != cls]
            labels += [int(c) for c in rng.choice(others, size=extra, replace=False)]

        for _ in range(MAX_PLACEMENT_ATTEMPTS):
            placed = self._place(labels, size, rng)
            if placed is not None:
                image, mask = self._composite(background, placed, rng)
                return SceneSample(
                    sample_id=sample_id,
                    image=image.transpose(2, 0, 1).astype(np.float64) / 255.0,
                    labels=tuple(labels),
                    gt_mask=mask,
                    bg_class=bg_class,
                    seed=sample_seed,
                    split=split,
                )
        raise DataError(f"could not place {labels} in a {size}px scene after {MAX_PLACEMENT_ATTEMPTS} attempts")

    def background_sample(self, seed: int, index: int, bg_class: int, sample_id: int) -> SceneSample:
        """A texture-only scene used to ground background captions during pretraining."""
        sample_seed = int(np.random.SeedSequence([seed, _SPLIT_CODES["background"], index]).generate_state(1)[0])
        rng = np.random.default_rng(sample_seed)
        background = render_texture(self.background_names[bg_class], self.spec.image_size, rng)
        return SceneSample(
            sample_id=sample_id,
            image=background.transpose(2, 0, 1).astype(np.float64) / 255.0,
            labels=(),
            gt_mask=np.zeros((self.spec.image_size, self.spec.image_size), dtype=np.uint8),
            bg_class=bg_class,
            seed=sample_seed,
            split="background",
        )

    def _place(self, labels: Sequence[int], size: int, rng: np.random.Generator) -> Optional[List[Tuple[int, np.ndarray]]]:
        multi = len(labels) > 1
        low, high = (0.12, 0.22) if multi else (0.18, 0.32)
        placed: List[Tuple[int, np.ndarray]] = []
        union = np.zeros((size, size), dtype=np.uint8)
        for cls in labels:
            shape, _ = self.catalog[cls]
            radius = rng.uniform(low, high) * size
            center = (rng.uniform(radius, size - radius), rng.uniform(radius, size - radius))
            mask = rasterize_shape(shape, size, center, radius, rng.uniform(0.0, 2.0 * math.pi))
            if mask.sum() == 0:
                return None
            placed.append((cls, mask))
            union = union | mask
        # later objects occlude earlier ones; every object must keep a visible part
        for position, (_, mask) in enumerate(placed):
            covering = np.zeros_like(union)
            for _, later in placed[position + 1:]:
                covering = covering | later
            if (mask & (1 - covering)).sum() < max(4, size * size // 400):
                return None
        fraction = union.mean()
        if not MIN_FOREGROUND_FRACTION <= fraction <= MAX_FOREGROUND_FRACTION:
            return None
        return placed

    def _composite(self, background: np.ndarray, placed: List[Tuple[int, np.ndarray]], rng: np.random.Generator):
        image = background.astype(np.int32)
        union = np.zeros(background.shape[:2], dtype=np.uint8)
        for cls, mask in placed:
            _, color = self.catalog[cls]
            tint = np.asarray(COLORS[color], dtype=np.int32) + rng.integers(-15, 16, size=3)
            shade = rng.integers(-8, 9, size=background.shape[:2])[..., None]
            fill = np.clip(tint[None, None, :] + shade, 0, 255)
            image = np.where(mask[..., None] == 1, fill, image)
            union = union | mask
        return np.clip(image, 0, 255).astype(np.uint8), union


def generate(spec: DatasetSpec, seed: int) -> SceneDataset:
    """Generate a ShapeScenes dataset; same (spec, seed) gives byte-identical samples."""
    return SceneGenerator(spec).generate(seed)


def label_histogram(samples: Sequence[SceneSample], num_classes: int) -> Dict[int, int]:
    counts = {c: 0 for c in range(num_classes)}
    for sample in samples:
        counts[sample.label] += 1
    return counts
