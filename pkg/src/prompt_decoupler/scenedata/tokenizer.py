"""
Closed-vocabulary whitespace tokenizer and the prompt templates.
"""
import logging
from typing import Dict, List, Sequence, Tuple

import numpy as np

from prompt_decoupler.errors import ContractError, VocabularyError
from prompt_decoupler.scenedata.textures import BACKGROUND_NAMES

logger = logging.getLogger(__name__)

SHAPES: Tuple[str, ...] = (
    "disk", "square", "triangle", "diamond", "cross", "ring", "star", "hexagon", "bar", "crescent",
)
COLORS: Dict[str, Tuple[int, int, int]] = {
    "red": (220, 30, 40),
    "blue": (30, 60, 230),
    "yellow": (240, 220, 30),
}
MAX_CLASSES = len(SHAPES) * len(COLORS)

FOREGROUND_TEMPLATE = "a photo of {}"
BACKGROUND_TEMPLATE = "a clean origami {}"

PAD, SOS, EOT = "<pad>", "<sos>", "<eot>"
SPECIAL_TOKENS: Tuple[str, ...] = (PAD, SOS, EOT)
TEMPLATE_WORDS: Tuple[str, ...] = ("a", "photo", "of", "clean", "origami")


def class_catalog(num_classes: int) -> List[Tuple[str, str]]:
    """
    Shape/color pairs of the first num_classes foreground classes.

    Consecutive classes cycle through shapes and colors together, so any prefix of
    the catalog mixes both attributes and every pair is distinct up to MAX_CLASSES.
    """
    if not 1 <= num_classes <= MAX_CLASSES:
        raise ContractError(f"num_classes must lie in [1, {MAX_CLASSES}], got {num_classes}")
    colors = list(COLORS)
    return [(SHAPES[i % len(SHAPES)], colors[i % len(colors)]) for i in range(num_classes)]


def class_names(num_classes: int) -> List[str]:
    return [f"{color}-{shape}" for shape, color in class_catalog(num_classes)]


def render_foreground(name: str) -> str:
    return FOREGROUND_TEMPLATE.format(name)


def render_background(name: str) -> str:
    return BACKGROUND_TEMPLATE.format(name)


class Tokenizer:
    """
    Whitespace tokenizer over a closed vocabulary.

    The vocabulary is the special tokens, the template words, every catalog class
    name and every background name, in that order, so ids never depend on the
    dataset size.
    """

    def __init__(self, context_length: int = 8):
        if context_length < 3:
            raise ContractError(f"context length must leave room for <sos> and <eot>, got {context_length}")
        self.context_length = context_length
        words = list(SPECIAL_TOKENS) + list(TEMPLATE_WORDS) + class_names(MAX_CLASSES) + list(BACKGROUND_NAMES)
        self.vocabulary: Tuple[str, ...] = tuple(words)
        self._ids: Dict[str, int] = {word: i for i, word in enumerate(words)}

    @property
    def vocab_size(self) -> int:
        return len(self.vocabulary)

    @property
    def pad_id(self) -> int:
        return self._ids[PAD]

    @property
    def eot_id(self) -> int:
        return self._ids[EOT]

    def encode(self, text: str) -> np.ndarray:
        """
        Tokenize text into a fixed-length id sequence.

        Returns:
            int64 array of length context_length: <sos>, words, <eot>, padding

        Raises:
            VocabularyError: If a word is outside the vocabulary
            ContractError: If the text does not fit the context length
        """
        words = text.split()
        unknown = [w for w in words if w not in self._ids]
        if unknown:
            raise VocabularyError(f"words outside the vocabulary: {unknown}")
        if len(words) + 2 > self.context_length:
            raise ContractError(f"'{text}' needs {len(words) + 2} tokens, context length is {self.context_length}")
        ids = [self._ids[SOS]] + [self._ids[w] for w in words] + [self._ids[EOT]]
        ids += [self._ids[PAD]] * (self.context_length - len(ids))
        return np.asarray(ids, dtype=np.int64)

    def encode_batch(self, texts: Sequence[str]) -> np.ndarray:
        return np.stack([self.encode(text) for text in texts]) if texts else np.zeros((0, self.context_length), np.int64)

    def decode(self, ids: Sequence[int]) -> str:
        words = []
        for token in ids:
            word = self.vocabulary[int(token)]
            if word == EOT:
                break
            if word not in SPECIAL_TOKENS:
                words.append(word)
        return " ".join(words)
