"""Alignment objectives: classification, foreground/background text alignment and the visual triplet."""
from prompt_decoupler.losses.alignment import (
    BackgroundSpace,
    LossComponents,
    LossWeights,
    assign_bg_pseudo,
    contrastive_loss,
    cross_entropy,
    loss_all,
    loss_b,
    loss_cls,
    loss_f,
    loss_v,
    multilabel_soft_margin,
    similarity_logits,
)

__all__ = [
    "BackgroundSpace",
    "LossComponents",
    "LossWeights",
    "assign_bg_pseudo",
    "contrastive_loss",
    "cross_entropy",
    "loss_all",
    "loss_b",
    "loss_cls",
    "loss_f",
    "loss_v",
    "multilabel_soft_margin",
    "similarity_logits",
]
