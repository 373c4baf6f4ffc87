"""
Alignment objectives for decoupled prompt tuning.

Every softmax or sigmoid logit is a cosine similarity divided by the fixed
temperature tau. Features passed in are expected to be unit-normalized.
"""
import logging
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from prompt_decoupler.autograd import Tensor, as_tensor, log_softmax, no_grad
from prompt_decoupler.errors import ConfigError, ContractError, ShapeError
from prompt_decoupler.scenedata.textures import BACKGROUND_NAMES
from prompt_decoupler.scenedata.tokenizer import BACKGROUND_TEMPLATE

logger = logging.getLogger(__name__)

FeatureLike = Union[Tensor, np.ndarray]

DEFAULT_TEMPERATURE = 0.07
TRIPLET_MODES = ("full", "foreground-positive", "background-negative")


@dataclass
class LossWeights:
    """
    Coefficients of the composite objective.

    Attributes:
        cls: gamma_cls, image-to-text classification
        v: gamma_v, visual triplet
        f: gamma_f, foreground-text alignment
        b: gamma_b, background-text alignment
        margin: alpha, triplet margin
        triplet_mode: "full" hinge, or only its foreground-positive / background-negative term
    """

    cls: float = 1.0
    v: float = 0.6
    f: float = 0.4
    b: float = 0.1
    margin: float = 5.0
    triplet_mode: str = "full"

    PRESETS = {
        "fewshot": {"cls": 1.0, "v": 0.6, "f": 0.4, "b": 0.1},
        "base-to-novel": {"cls": 1.0, "v": 0.4, "f": 0.4, "b": 0.5},
    }

    @classmethod
    def preset(cls, name: str) -> "LossWeights":
        if name not in cls.PRESETS:
            raise ConfigError(f"unknown weights preset '{name}', expected one of {sorted(cls.PRESETS)}")
        return cls(**cls.PRESETS[name])

    def validate(self) -> None:
        for name in ("cls", "v", "f", "b", "margin"):
            value = getattr(self, name)
            if value < 0:
                raise ContractError(f"loss weight {name} must be nonnegative, got {value}")
        if self.triplet_mode not in TRIPLET_MODES:
            raise ContractError(f"triplet mode must be one of {TRIPLET_MODES}, got {self.triplet_mode}")

    def to_dict(self) -> Dict[str, Union[float, str]]:
        return asdict(self)


@dataclass
class BackgroundSpace:
    """
    Background class names, their caption template and cached unprompted text features Z_U.
    """

    names: Tuple[str, ...] = BACKGROUND_NAMES
    template: str = BACKGROUND_TEMPLATE
    unprompted: Optional[np.ndarray] = None

    def __post_init__(self):
        self.names = tuple(self.names)
        if not self.names:
            raise ContractError("background space needs at least one class")
        if len(set(self.names)) != len(self.names):
            raise ContractError(f"background class names must be unique: {self.names}")

    @classmethod
    def first(cls, count: int) -> "BackgroundSpace":
        if not 1 <= count <= len(BACKGROUND_NAMES):
            raise ContractError(f"background class count must lie in [1, {len(BACKGROUND_NAMES)}], got {count}")
        return cls(names=BACKGROUND_NAMES[:count])

    @property
    def size(self) -> int:
        return len(self.names)

    def captions(self) -> List[str]:
        return [self.template.format(name) for name in self.names]

    def tokens(self, tokenizer) -> np.ndarray:
        return tokenizer.encode_batch(self.captions())

    def unprompted_features(self, encoder, tokenizer) -> np.ndarray:
        """Z_U from the frozen text encoder without prompts, computed once and cached."""
        if self.unprompted is None:
            with no_grad():
                self.unprompted = encoder.encode_text(self.tokens(tokenizer)).data.copy()
            logger.debug(f"Cached unprompted features for {self.size} background classes")
        return self.unprompted


@dataclass
class LossComponents:
    """Per-batch component losses; a component that was not computed is None."""

    cls: Optional[Tensor] = None
    v: Optional[Tensor] = None
    f: Optional[Tensor] = None
    b: Optional[Tensor] = None

    def values(self) -> Dict[str, float]:
        return {name: (float(getattr(self, name).item()) if getattr(self, name) is not None else 0.0)
                for name in ("cls", "v", "f", "b")}


def similarity_logits(features: FeatureLike, class_features: FeatureLike, temperature: float = DEFAULT_TEMPERATURE) -> Tensor:
    features, class_features = as_tensor(features), as_tensor(class_features)
    if features.ndim != 2 or class_features.ndim != 2 or features.shape[1] != class_features.shape[1]:
        raise ShapeError(f"cannot compare features {features.shape} with class features {class_features.shape}")
    return (features @ class_features.transpose(1, 0)) * (1.0 / temperature)


def cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean of -log softmax(logits)[i, labels[i]]."""
    labels = np.asarray(labels, dtype=np.int64)
    b, k = logits.shape
    if labels.shape != (b,):
        raise ShapeError(f"expected {b} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ContractError(f"labels must lie in [0, {k}), got {labels.tolist()}")
    picked = log_softmax(logits, axis=-1)[np.arange(b), labels]
    return -picked.mean()


def loss_cls(image_features: FeatureLike, class_features: FeatureLike, labels: Sequence[int],
             temperature: float = DEFAULT_TEMPERATURE) -> Tensor:
    """
    Image-to-text classification loss over prompted features.

    Args:
        image_features: (b, d) prompted image features
        class_features: (k, d) prompted foreground class text features
        labels: b class indices
        temperature: tau

    Returns:
        Scalar mean cross-entropy at the true class
    """
    return cross_entropy(similarity_logits(image_features, class_features, temperature), labels)


def loss_f(foreground_features: FeatureLike, class_features: FeatureLike, labels: Sequence[int],
           temperature: float = DEFAULT_TEMPERATURE) -> Tensor:
    """Foreground-text alignment: the classification loss applied to features of M * I."""
    return loss_cls(foreground_features, class_features, labels, temperature)


def assign_bg_pseudo(background_features: np.ndarray, background_class_features: np.ndarray) -> np.ndarray:
    """
    Background pseudo-labels y_b = argmax_j sim(Z_b, Z_U^j), lowest index on ties.

    Raises:
        ContractError: If the background space is empty
    """
    z_b = np.asarray(background_features.data if isinstance(background_features, Tensor) else background_features, dtype=np.float64)
    z_u = np.asarray(background_class_features.data if isinstance(background_class_features, Tensor) else background_class_features, dtype=np.float64)
    if z_u.ndim != 2 or z_u.shape[0] == 0:
        raise ContractError("background space is empty")
    if z_b.ndim == 1:
        z_b = z_b[None]
    return np.argmax(z_b @ z_u.T, axis=1).astype(np.int64)


def loss_b(background_features: FeatureLike, background_class_features: FeatureLike, pseudo_labels: Sequence[int],
           temperature: float = DEFAULT_TEMPERATURE) -> Tensor:
    """Background-text alignment of prompted (1 - M) * I features against prompted background captions."""
    return cross_entropy(similarity_logits(background_features, background_class_features, temperature), pseudo_labels)


def loss_v(image_features: FeatureLike, foreground_features: FeatureLike, background_features: FeatureLike,
           margin: float = 5.0, mode: str = "full") -> Tensor:
    """
    Pull-push triplet loss with L1 distances, summed over the batch.

    The "full" mode is sum_i max(|Z_I - Z_f|_1 - |Z_I - Z_b|_1 + alpha, 0).
    "foreground-positive" keeps only the pull term sum_i |Z_I - Z_f|_1 and
    "background-negative" only the push term -sum_i |Z_I - Z_b|_1; neither single
    term uses the margin.

    Raises:
        ShapeError: If the three batches are not aligned
        ContractError: On an unknown mode
    """
    z_i, z_f, z_b = as_tensor(image_features), as_tensor(foreground_features), as_tensor(background_features)
    if not z_i.shape == z_f.shape == z_b.shape:
        raise ShapeError(f"triplet batches are misaligned: {z_i.shape}, {z_f.shape}, {z_b.shape}")
    if mode not in TRIPLET_MODES:
        raise ContractError(f"triplet mode must be one of {TRIPLET_MODES}, got {mode}")
    d_f = (z_i - z_f).abs().sum(axis=-1)
    d_b = (z_i - z_b).abs().sum(axis=-1)
    if mode == "foreground-positive":
        return d_f.sum()
    if mode == "background-negative":
        return -d_b.sum()
    return (d_f - d_b + margin).relu().sum()


def multilabel_soft_margin(image_features: FeatureLike, class_features: FeatureLike, label_sets: Sequence[Sequence[int]],
                           temperature: float = DEFAULT_TEMPERATURE) -> Tensor:
    """
    Mean over samples and classes of -[y log sigma(s) + (1 - y) log(1 - sigma(s))], s = sim / tau.

    An empty label set is an all-negative sample.
    """
    logits = similarity_logits(image_features, class_features, temperature)
    b, k = logits.shape
    if len(label_sets) != b:
        raise ShapeError(f"expected {b} label sets, got {len(label_sets)}")
    targets = np.zeros((b, k))
    for row, labels in enumerate(label_sets):
        for label in labels:
            if not 0 <= label < k:
                raise ContractError(f"label {label} outside [0, {k})")
            targets[row, label] = 1.0
    per_entry = (-logits).softplus() * targets + logits.softplus() * (1.0 - targets)
    return per_entry.mean()


def contrastive_loss(image_features: FeatureLike, text_features: FeatureLike, temperature: float = DEFAULT_TEMPERATURE) -> Tensor:
    """Symmetric InfoNCE over a batch of matched image/text pairs."""
    logits = similarity_logits(image_features, text_features, temperature)
    b = logits.shape[0]
    if logits.shape != (b, b):
        raise ShapeError(f"contrastive loss needs as many texts as images, got logits {logits.shape}")
    targets = np.arange(b)
    return (cross_entropy(logits, targets) + cross_entropy(logits.transpose(1, 0), targets)) * 0.5


def loss_all(components: LossComponents, weights: LossWeights) -> Tensor:
    """
    gamma_cls * L_cls + gamma_v * L_v + gamma_f * L_f + gamma_b * L_b.

    Terms with a zero weight are left out of the graph entirely.

    Raises:
        ContractError: On a negative weight, or a weighted component that was not computed
    """
    weights.validate()
    total = None
    for name in ("cls", "v", "f", "b"):
        gamma = getattr(weights, name)
        if gamma == 0:
            continue
        component = getattr(components, name)
        if component is None:
            raise ContractError(f"loss component {name} has weight {gamma} but was not computed")
        term = as_tensor(component) * gamma
        total = term if total is None else total + term
    return total if total is not None else Tensor(0.0)
