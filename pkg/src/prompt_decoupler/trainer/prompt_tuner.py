"""
Prompt tuning on a frozen dual encoder with visual disentanglement, and evaluation.
"""
import logging
from dataclasses import asdict, dataclass
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from prompt_decoupler.autograd import SGD, backward, cosine_lr
from prompt_decoupler.disentangle import GradCamMasker, SemanticMask, VisualTriplet, blur_mask, erase_mask, make_triplet, oracle_mask
from prompt_decoupler.encoder.model import DualEncoder, PromptSet, encode_images, encode_texts
from prompt_decoupler.errors import ContractError, TrainingError
from prompt_decoupler.losses import (
    BackgroundSpace,
    LossComponents,
    LossWeights,
    assign_bg_pseudo,
    loss_all,
    loss_b,
    loss_cls,
    loss_f,
    loss_v,
    multilabel_soft_margin,
)
from prompt_decoupler.scenedata.generator import SceneSample
from prompt_decoupler.scenedata.textures import BACKGROUND_NAMES
from prompt_decoupler.scenedata.tokenizer import Tokenizer, render_foreground
from prompt_decoupler.trainer.metrics import MetricsReport, accuracy, mean_average_precision, per_class_accuracy

logger = logging.getLogger(__name__)

MASK_SOURCES = ("gradcam", "oracle")
MASK_STRATEGIES = ("hard", "blur")


@dataclass
class TrainConfig:
    """
    Prompt-tuning recipe.

    Attributes:
        lr: SGD learning rate
        batch_size: Samples per step
        epochs: Passes over the training subset
        momentum: SGD momentum, 0 for plain SGD
        weight_decay: L2 penalty on prompt parameters
        schedule: "constant" or "cosine"
        mask_source: "gradcam" (recomputed every epoch with the current prompts) or "oracle"
        mask_strategy: "hard" fill or Gaussian "blur" of the mask boundary
        beta: CAM threshold
        upsample: CAM upsampling, "bilinear" or "nearest"
        erase_rate: Share of foreground grid cells erased from each mask
        erase_grid: Grid cells per side for erasing
        blur_kernel: (width, height) of the blur kernel, both odd
        blur_sigma: Range sigma is drawn from
        recompute_pseudo_labels: Reassign background pseudo-labels every epoch instead of once
        prompt_init_std: Standard deviation of the textual prompt initialization
    """

    lr: float = 0.0035
    batch_size: int = 4
    epochs: int = 30
    momentum: float = 0.0
    weight_decay: float = 0.0
    schedule: str = "constant"
    mask_source: str = "gradcam"
    mask_strategy: str = "hard"
    beta: float = 0.5
    upsample: str = "bilinear"
    erase_rate: float = 0.0
    erase_grid: int = 8
    blur_kernel: Tuple[int, int] = (5, 9)
    blur_sigma: Tuple[float, float] = (0.1, 1.0)
    recompute_pseudo_labels: bool = False
    prompt_init_std: float = 0.02

    def validate(self) -> None:
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ContractError(f"lr, batch size and epochs must be positive, got {self.lr}, {self.batch_size}, {self.epochs}")
        if self.mask_source not in MASK_SOURCES:
            raise ContractError(f"mask source must be one of {MASK_SOURCES}, got {self.mask_source}")
        if self.mask_strategy not in MASK_STRATEGIES:
            raise ContractError(f"mask strategy must be one of {MASK_STRATEGIES}, got {self.mask_strategy}")
        if self.schedule not in ("constant", "cosine"):
            raise ContractError(f"schedule must be 'constant' or 'cosine', got {self.schedule}")
        if not 0.0 <= self.erase_rate <= 1.0:
            raise ContractError(f"erase rate must lie in [0, 1], got {self.erase_rate}")
        if not 0.0 <= self.beta < 1.0:
            raise ContractError(f"beta must lie in [0, 1), got {self.beta}")

    def to_dict(self) -> Dict:
        return asdict(self)


class TuneResult(NamedTuple):
    prompts: PromptSet
    report: MetricsReport


def _derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


class PromptTuner:
    """
    Optimizes a PromptSet against the composite alignment loss; the backbone stays frozen.

    Args:
        encoder: Frozen dual encoder
        class_names: Names of every foreground class, indexed by global class id
        config: Training recipe
        weights: Loss coefficients; zero-weighted terms are never computed
        background: Background space for the background-text alignment
        multi_label: Use the multi-label soft-margin loss in place of cross-entropy
    """

    def __init__(self, encoder: DualEncoder, class_names: Sequence[str], config: TrainConfig, weights: LossWeights,
                 background: Optional[BackgroundSpace] = None, multi_label: bool = False):
        if not encoder.frozen:
            raise ContractError("prompt tuning needs a frozen backbone")
        config.validate()
        weights.validate()
        self.encoder = encoder
        self.class_names = list(class_names)
        self.config = config
        self.weights = weights
        self.background = background or BackgroundSpace()
        self.multi_label = multi_label
        self.tokenizer = Tokenizer(encoder.config.context_length)
        self.temperature = encoder.config.temperature

    # ----------------------------------------------------------------- masks
    @property
    def needs_triplets(self) -> bool:
        w = self.weights
        return w.v > 0 or w.f > 0 or w.b > 0

    def build_masks(self, samples: Sequence[SceneSample], prompts: PromptSet, class_ids: Sequence[int], seed: int) -> List[SemanticMask]:
        """Masks for one epoch: Grad-CAM with the current prompts or ground truth, then erasing."""
        cfg = self.config
        if cfg.mask_source == "gradcam":
            local = {c: i for i, c in enumerate(class_ids)}
            class_features = self.class_features(prompts, class_ids)
            masker = GradCamMasker(self.encoder, cfg.beta, cfg.upsample)
            masks: List[SemanticMask] = []
            for start in range(0, len(samples), 16):
                chunk = samples[start:start + 16]
                labels = [[local[c] for c in s.labels if c in local] for s in chunk]
                masks.extend(masker.masks(np.stack([s.image for s in chunk]), class_features, labels, prompts))
        else:
            masks = [oracle_mask(s) for s in samples]
        if cfg.erase_rate > 0:
            masks = [erase_mask(m, cfg.erase_rate, cfg.erase_grid, _derived_seed(seed, s.sample_id)) for m, s in zip(masks, samples)]
        return masks

    def build_triplets(self, samples: Sequence[SceneSample], masks: Sequence[SemanticMask], seed: int, epoch: int) -> List[VisualTriplet]:
        cfg = self.config
        if cfg.mask_strategy == "blur":
            return [
                blur_mask(s.image, m, tuple(cfg.blur_kernel), tuple(cfg.blur_sigma), _derived_seed(seed, epoch, s.sample_id))
                for s, m in zip(samples, masks)
            ]
        return [make_triplet(s.image, m) for s, m in zip(samples, masks)]

    def assign_pseudo_labels(self, triplets: Sequence[VisualTriplet]) -> np.ndarray:
        """Background pseudo-labels from unprompted features of I_b."""
        z_b = encode_images(self.encoder, np.stack([t.background for t in triplets]))
        z_u = self.background.unprompted_features(self.encoder, self.tokenizer)
        return assign_bg_pseudo(z_b, z_u)

    def pseudo_label_accuracy(self, labels: np.ndarray, samples: Sequence[SceneSample]) -> float:
        """Share (percent) of pseudo-labels naming the texture the generator actually drew."""
        truth = [BACKGROUND_NAMES[s.bg_class] for s in samples]
        return float(100.0 * np.mean([self.background.names[int(l)] == t for l, t in zip(labels, truth)]))

    # ----------------------------------------------------------------- texts
    def class_tokens(self, class_ids: Sequence[int]) -> np.ndarray:
        return self.tokenizer.encode_batch([render_foreground(self.class_names[c]) for c in class_ids])

    def class_features(self, prompts: Optional[PromptSet], class_ids: Sequence[int]) -> np.ndarray:
        return encode_texts(self.encoder, self.class_tokens(class_ids), prompts)

    # ----------------------------------------------------------------- training
    def tune(self, samples: Sequence[SceneSample], seed: int, class_ids: Optional[Sequence[int]] = None,
             prompts: Optional[PromptSet] = None) -> TuneResult:
        """
        Train prompts on samples.

        Args:
            samples: Training subset
            seed: Seeds prompt initialization, batch order and mask perturbations
            class_ids: Label space of training (e.g. the base classes); all classes by default
            prompts: Starting prompts; a fresh seeded PromptSet by default

        Returns:
            TuneResult with the trained prompts and a report holding the loss traces

        Raises:
            ContractError: If samples is empty or a label lies outside class_ids
            TrainingError: If a loss is not finite, or the backbone changed
        """
        cfg, w = self.config, self.weights
        if not samples:
            raise ContractError("prompt tuning needs at least one training sample")
        class_ids = list(range(len(self.class_names))) if class_ids is None else list(class_ids)
        local = {c: i for i, c in enumerate(class_ids)}
        for s in samples:
            if any(c not in local for c in s.labels):
                raise ContractError(f"sample {s.sample_id} has labels {s.labels} outside the training classes {class_ids}")
        samples = list(samples)
        fingerprint = self.encoder.fingerprint()
        prompts = prompts or PromptSet.initialize(self.encoder.config, seed, cfg.prompt_init_std)
        optimizer = SGD(prompts.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
        rng = np.random.default_rng([seed, 31337])

        class_tokens = self.class_tokens(class_ids)
        bg_tokens = self.background.tokens(self.tokenizer)
        images = np.stack([s.image for s in samples])
        label_sets = [[local[c] for c in s.labels] for s in samples]
        primary = np.asarray([local[s.label] for s in samples])
        n_batches = (len(samples) + cfg.batch_size - 1) // cfg.batch_size
        total_steps = n_batches * cfg.epochs

        report = MetricsReport()
        pseudo: Optional[np.ndarray] = None
        step = 0
        logger.info(
            f"Tuning prompts on {len(samples)} samples, {len(class_ids)} classes, {cfg.epochs} epochs, "
            f"weights cls={w.cls} v={w.v} f={w.f} b={w.b}, masks={cfg.mask_source}/{cfg.mask_strategy}"
        )
        for epoch in range(1, cfg.epochs + 1):
            triplets: List[VisualTriplet] = []
            if self.needs_triplets:
                masks = self.build_masks(samples, prompts, class_ids, seed)
                triplets = self.build_triplets(samples, masks, seed, epoch)
                if w.b > 0 and (pseudo is None or cfg.recompute_pseudo_labels):
                    pseudo = self.assign_pseudo_labels(triplets)
                    report.pseudo_label_accuracy = self.pseudo_label_accuracy(pseudo, samples)
                    logger.debug(f"Pseudo-label accuracy {report.pseudo_label_accuracy:.2f}%")

            order = rng.permutation(len(samples))
            sums = {"loss": 0.0, "cls": 0.0, "v": 0.0, "f": 0.0, "b": 0.0}
            lr = cfg.lr
            for batch_no in range(1, n_batches + 1):
                idx = order[(batch_no - 1) * cfg.batch_size:batch_no * cfg.batch_size]
                components = self.batch_components(
                    prompts,
                    images[idx],
                    [triplets[i] for i in idx] if triplets else [],
                    [label_sets[i] for i in idx],
                    primary[idx],
                    class_tokens,
                    bg_tokens,
                    pseudo[idx] if pseudo is not None else None,
                )
                total = loss_all(components, w)
                value = total.item()
                if not np.isfinite(value):
                    logger.error(f"Non-finite loss at epoch {epoch}, batch {batch_no}")
                    raise TrainingError(f"non-finite loss at epoch {epoch}, batch {batch_no}")
                lr = cosine_lr(cfg.lr, step, total_steps) if cfg.schedule == "cosine" else cfg.lr
                optimizer.lr = lr
                optimizer.zero_grad()
                backward(total)
                optimizer.step()
                step += 1
                sums["loss"] += value
                for name, part in components.values().items():
                    sums[name] += part
                logger.debug(f"epoch {epoch} batch {batch_no}: loss {value:.6f}")
            row = {"epoch": epoch, **{k: v / n_batches for k, v in sums.items()}, "lr": lr}
            report.epochs.append(row)
            logger.info(f"Epoch {epoch}/{cfg.epochs}: loss {row['loss']:.4f} (cls {row['cls']:.4f}, v {row['v']:.4f}, f {row['f']:.4f}, b {row['b']:.4f})")

        if self.encoder.fingerprint() != fingerprint:
            raise TrainingError("backbone weights changed during prompt tuning")
        return TuneResult(prompts, report)

    def batch_components(
        self,
        prompts: PromptSet,
        images: np.ndarray,
        triplets: Sequence[VisualTriplet],
        label_sets: Sequence[Sequence[int]],
        labels: np.ndarray,
        class_tokens: np.ndarray,
        bg_tokens: np.ndarray,
        pseudo: Optional[np.ndarray],
    ) -> LossComponents:
        """
        Component losses of one batch; only terms with a nonzero weight are built.

        Originals, foregrounds and backgrounds go through the image encoder as a
        single stacked batch; class and background captions share one text pass.
        Labels are local indices into class_tokens.
        """
        w = self.weights
        b = len(images)
        use_fg = bool(triplets) and (w.v > 0 or w.f > 0)
        use_bg = bool(triplets) and (w.v > 0 or w.b > 0)
        parts = [images]
        if use_fg:
            parts.append(np.stack([t.foreground for t in triplets]))
        if use_bg:
            parts.append(np.stack([t.background for t in triplets]))
        features = self.encoder.encode_image(np.concatenate(parts, axis=0), prompts).features
        z_i = features[:b]
        z_f = features[b:2 * b] if use_fg else None
        z_b = features[len(parts) * b - b:] if use_bg else None

        k = len(class_tokens)
        tokens = np.concatenate([class_tokens, bg_tokens]) if w.b > 0 else class_tokens
        text = self.encoder.encode_text(tokens, prompts)
        class_features = text[:k] if w.b > 0 else text

        components = LossComponents()
        if w.cls > 0:
            components.cls = self._classification(z_i, class_features, label_sets, labels)
        if w.f > 0:
            components.f = (multilabel_soft_margin(z_f, class_features, label_sets, self.temperature) if self.multi_label
                            else loss_f(z_f, class_features, labels, self.temperature))
        if w.v > 0:
            components.v = loss_v(z_i, z_f, z_b, w.margin, w.triplet_mode)
        if w.b > 0:
            components.b = loss_b(z_b, text[k:], pseudo, self.temperature)
        return components

    def _classification(self, features, class_features, label_sets, labels):
        if self.multi_label:
            return multilabel_soft_margin(features, class_features, label_sets, self.temperature)
        return loss_cls(features, class_features, labels, self.temperature)


def evaluate(encoder: DualEncoder, prompts: Optional[PromptSet], samples: Sequence[SceneSample], class_names: Sequence[str],
             class_ids: Optional[Sequence[int]] = None, multi_label: bool = False) -> MetricsReport:
    """
    Score test samples from the original images and foreground class texts only.

    Encodes each image once and each class text once; no masks, triplets or
    background texts are involved.

    Args:
        encoder: Frozen dual encoder
        prompts: Trained prompts, or None for zero-shot matching
        samples: Test samples
        class_names: Names of all classes, indexed by global id
        class_ids: Label space to score in; all classes by default
        multi_label: Report mAP instead of top-1 accuracy

    Raises:
        ContractError: If samples is empty
    """
    if not samples:
        raise ContractError("evaluation needs at least one test sample")
    class_ids = list(range(len(class_names))) if class_ids is None else list(class_ids)
    local = {c: i for i, c in enumerate(class_ids)}
    tokenizer = Tokenizer(encoder.config.context_length)
    class_features = encode_texts(encoder, tokenizer.encode_batch([render_foreground(class_names[c]) for c in class_ids]), prompts)
    image_features = encode_images(encoder, np.stack([s.image for s in samples]), prompts)
    scores = image_features @ class_features.T
    report = MetricsReport()
    if multi_label:
        label_sets = [[local[c] for c in s.labels if c in local] for s in samples]
        report.mean_average_precision = mean_average_precision(scores, label_sets)
        logger.info(f"Evaluated {len(samples)} samples: mAP {report.mean_average_precision:.2f}")
    else:
        labels = np.asarray([local[s.label] for s in samples])
        predictions = scores.argmax(axis=1)
        report.accuracy = accuracy(predictions, labels)
        report.per_class_accuracy = {class_ids[c]: v for c, v in per_class_accuracy(predictions, labels).items()}
        logger.info(f"Evaluated {len(samples)} samples: accuracy {report.accuracy:.2f}%")
    return report
