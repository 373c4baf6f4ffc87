"""
Contrastive pretraining of the dual encoder on generated scene/caption pairs.
"""
import dataclasses
import logging
import math
from collections import deque
from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from prompt_decoupler.autograd import SGD, backward, cosine_lr, no_grad
from prompt_decoupler.encoder.model import DualEncoder, EncoderConfig, encode_images, zero_shot_predict
from prompt_decoupler.errors import ContractError, TrainingError
from prompt_decoupler.losses.alignment import contrastive_loss
from prompt_decoupler.scenedata.generator import DatasetSpec, SceneGenerator, SceneSample
from prompt_decoupler.scenedata.tokenizer import Tokenizer, render_background, render_foreground

logger = logging.getLogger(__name__)


@dataclass
class PretrainConfig:
    """
    Recipe for contrastive pretraining.

    Attributes:
        corpus_size: Scene/caption pairs per epoch
        background_fraction: Share of the corpus made of texture-only scenes with background captions
        batch_size: Pairs per batch; captions inside a batch are distinct
        epochs: Passes over the corpus
        lr: Base learning rate
        momentum: SGD momentum
        weight_decay: L2 penalty added to the gradient
        schedule: "cosine" decay to zero or "constant"
    """

    corpus_size: int = 20000
    background_fraction: float = 0.2
    batch_size: int = 32
    epochs: int = 2
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    schedule: str = "cosine"

    def validate(self) -> None:
        if self.corpus_size < 2:
            raise ContractError(f"corpus size must be at least 2, got {self.corpus_size}")
        if not 0.0 <= self.background_fraction < 1.0:
            raise ContractError(f"background fraction must lie in [0, 1), got {self.background_fraction}")
        if self.batch_size < 2:
            raise ContractError(f"contrastive batches need at least 2 pairs, got {self.batch_size}")
        if self.epochs < 1 or self.lr <= 0:
            raise ContractError("epochs and learning rate must be positive")
        if self.schedule not in ("cosine", "constant"):
            raise ContractError(f"schedule must be 'cosine' or 'constant', got {self.schedule}")


class CorpusItem(NamedTuple):
    """Recipe of one pretraining pair; scenes are rendered on demand."""

    index: int
    kind: str
    cls: int
    caption: str


class PretrainResult(NamedTuple):
    encoder: DualEncoder
    history: List[Dict[str, float]]


def distinct_caption_batches(captions: Sequence[str], order: Sequence[int], batch_size: int) -> List[List[int]]:
    """
    Group indices into batches without repeated captions.

    Indices whose caption is already in the open batch are deferred to the next
    one. Batches of a single pair carry no contrastive signal and are dropped.
    """
    batches: List[List[int]] = []
    queue = deque(int(i) for i in order)
    current: List[int] = []
    seen = set()
    deferred: List[int] = []
    while queue:
        idx = queue.popleft()
        if captions[idx] in seen:
            deferred.append(idx)
        else:
            current.append(idx)
            seen.add(captions[idx])
        if len(current) == batch_size or not queue:
            if len(current) > 1:
                batches.append(current)
            current, seen = [], set()
            queue.extendleft(reversed(deferred))
            deferred = []
    return batches


class ContrastivePretrainer:
    """
    Trains every backbone weight with symmetric InfoNCE, then freezes the result.

    The corpus pairs foreground scenes with "a photo of <class>" and, for a
    configured share, texture-only scenes with "a clean origami <background>".
    """

    def __init__(self, encoder_config: EncoderConfig, data_spec: DatasetSpec, config: PretrainConfig):
        encoder_config.validate()
        config.validate()
        self.encoder_config = encoder_config
        self.config = config
        self.data_spec = dataclasses.replace(data_spec, multi_object=False, image_size=encoder_config.image_size)
        self.generator = SceneGenerator(self.data_spec)
        self.tokenizer = Tokenizer(encoder_config.context_length)
        if self.tokenizer.vocab_size > encoder_config.vocab_size:
            raise ContractError(
                f"vocabulary has {self.tokenizer.vocab_size} words, encoder embeds only {encoder_config.vocab_size}"
            )

    def build_corpus(self) -> List[CorpusItem]:
        cfg = self.config
        names = self.data_spec.class_names
        backgrounds = self.generator.background_names
        n_background = int(math.floor(cfg.corpus_size * cfg.background_fraction))
        items: List[CorpusItem] = []
        for i in range(cfg.corpus_size - n_background):
            cls = i % len(names)
            items.append(CorpusItem(i, "scene", cls, render_foreground(names[cls])))
        for i in range(n_background):
            bg = i % len(backgrounds)
            items.append(CorpusItem(i, "background", bg, render_background(backgrounds[bg])))
        return items

    def render(self, item: CorpusItem, seed: int) -> SceneSample:
        if item.kind == "background":
            return self.generator.background_sample(seed, item.index, item.cls, item.index)
        return self.generator.sample(seed, "pretrain", item.index, item.cls, item.index)

    def batch_arrays(self, items: Sequence[CorpusItem], seed: int) -> Tuple[np.ndarray, np.ndarray]:
        images = np.stack([self.render(item, seed).image for item in items])
        tokens = self.tokenizer.encode_batch([item.caption for item in items])
        return images, tokens

    def corpus_loss(self, encoder: DualEncoder, batches: Sequence[Sequence[CorpusItem]], seed: int) -> float:
        """Mean contrastive loss over batches, evaluated without building a graph."""
        losses = []
        with no_grad():
            for items in batches:
                images, tokens = self.batch_arrays(items, seed)
                z_i = encoder.encode_image(images).features
                z_t = encoder.encode_text(tokens)
                losses.append(contrastive_loss(z_i, z_t, self.encoder_config.temperature).item())
        return float(np.mean(losses)) if losses else float("nan")

    def fit(self, seed: int, held_out: Optional[Sequence[SceneSample]] = None) -> PretrainResult:
        """
        Pretrain from a seeded initialization.

        Args:
            seed: Seeds weight initialization, corpus rendering and batch order
            held_out: Scenes for the per-epoch zero-shot accuracy

        Returns:
            PretrainResult with the frozen encoder and one history row per epoch

        Raises:
            TrainingError: If a batch loss is not finite
        """
        cfg = self.config
        encoder = DualEncoder.initialize(self.encoder_config, seed)
        optimizer = SGD(encoder.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
        corpus = self.build_corpus()
        captions = [item.caption for item in corpus]
        rng = np.random.default_rng([seed, 104729])
        epoch_batches = [distinct_caption_batches(captions, rng.permutation(len(corpus)), cfg.batch_size) for _ in range(cfg.epochs)]
        total_steps = sum(len(batches) for batches in epoch_batches)
        logger.info(f"Pretraining on {len(corpus)} pairs for {cfg.epochs} epochs ({total_steps} steps)")

        history: List[Dict[str, float]] = []
        step = 0
        for epoch, batches in enumerate(epoch_batches, start=1):
            epoch_losses = []
            lr = optimizer.lr
            for batch_no, indices in enumerate(batches, start=1):
                images, tokens = self.batch_arrays([corpus[i] for i in indices], seed)
                z_i = encoder.encode_image(images).features
                z_t = encoder.encode_text(tokens)
                loss = contrastive_loss(z_i, z_t, self.encoder_config.temperature)
                value = loss.item()
                if not np.isfinite(value):
                    logger.error(f"Pretraining diverged at epoch {epoch}, batch {batch_no}")
                    raise TrainingError(f"non-finite pretraining loss at epoch {epoch}, batch {batch_no}")
                lr = cosine_lr(cfg.lr, step, total_steps) if cfg.schedule == "cosine" else cfg.lr
                optimizer.lr = lr
                optimizer.zero_grad()
                backward(loss)
                optimizer.step()
                epoch_losses.append(value)
                step += 1
                logger.debug(f"epoch {epoch} batch {batch_no}: loss {value:.6f} lr {lr:.6f}")
            row = {"epoch": epoch, "loss": float(np.mean(epoch_losses)), "lr": lr}
            if held_out:
                row["zero_shot_accuracy"] = zero_shot_accuracy(encoder, self.tokenizer, held_out, self.data_spec.class_names)
            history.append(row)
            logger.info(f"Pretraining epoch {epoch}/{cfg.epochs}: " + ", ".join(f"{k}={v:.4f}" for k, v in row.items() if k != "epoch"))

        frozen = encoder.freeze()
        logger.info(f"Froze pretrained backbone, fingerprint {frozen.fingerprint()[:16]}")
        return PretrainResult(frozen, history)


def zero_shot_accuracy(encoder: DualEncoder, tokenizer: Tokenizer, samples: Sequence[SceneSample], names: Sequence[str]) -> float:
    """Top-1 accuracy in percent of unprompted zero-shot matching against "a photo of <class>"."""
    if not samples:
        raise ContractError("zero-shot accuracy needs at least one sample")
    with no_grad():
        class_features = encoder.encode_text(tokenizer.encode_batch([render_foreground(n) for n in names])).data
    features = encode_images(encoder, np.stack([s.image for s in samples]))
    probs = zero_shot_predict(features, class_features, encoder.config.temperature)
    predictions = probs.argmax(axis=1)
    labels = np.asarray([s.label for s in samples])
    return float(100.0 * np.mean(predictions == labels))


def pretrain_contrastive(
    encoder_config: EncoderConfig,
    data_spec: DatasetSpec,
    config: PretrainConfig,
    seed: int,
    held_out: Optional[Sequence[SceneSample]] = None,
) -> PretrainResult:
    return ContrastivePretrainer(encoder_config, data_spec, config).fit(seed, held_out)
