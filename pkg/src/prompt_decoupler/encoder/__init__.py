"""Miniature dual encoder, coupled prompts, contrastive pretraining and checkpoints."""
from prompt_decoupler.encoder.model import (
    DualEncoder,
    EncoderConfig,
    ImageEncoding,
    PromptSet,
    couple_prompts,
    encode_images,
    encode_texts,
    zero_shot_predict,
)
from prompt_decoupler.encoder.checkpoint import load_backbone, load_prompts, save_backbone, save_prompts
from prompt_decoupler.encoder.pretraining import (
    ContrastivePretrainer,
    PretrainConfig,
    PretrainResult,
    pretrain_contrastive,
    zero_shot_accuracy,
)

__all__ = [
    "ContrastivePretrainer",
    "DualEncoder",
    "EncoderConfig",
    "ImageEncoding",
    "PretrainConfig",
    "PretrainResult",
    "PromptSet",
    "couple_prompts",
    "encode_images",
    "encode_texts",
    "load_backbone",
    "load_prompts",
    "pretrain_contrastive",
    "save_backbone",
    "save_prompts",
    "zero_shot_accuracy",
]
