"""
Miniature CLIP-style dual encoder with coupled deep prompts.

The image tower is a pre-LN vision transformer over p x p patches with a CLS
token; the text tower is a causal transformer over closed-vocabulary tokens,
pooled at the end-of-text token. Both project into a shared d-dim space and emit
L2-normalized features.
"""
import hashlib
import logging
import math
import threading
from dataclasses import asdict, dataclass
from typing import Dict, List, NamedTuple, Optional, Union

import numpy as np

from prompt_decoupler.autograd import Tensor, concat, l2_normalize, layer_norm, no_grad, softmax
from prompt_decoupler.errors import ContractError, ShapeError, VocabularyError

logger = logging.getLogger(__name__)

PAD_ID = 0
_MASK_VALUE = -1e9


@dataclass
class EncoderConfig:
    """
    Geometry of the dual encoder and of its prompts.

    Attributes:
        image_size: h = w in pixels
        patch_size: p; n = (h / p)^2 patches
        image_width: c_I
        text_width: c_T
        embed_dim: Shared projection dim d
        depth: Transformer blocks L per tower
        heads: Attention heads per block
        mlp_ratio: Hidden width multiplier of the block MLP
        vocab_size: Token embedding rows
        context_length: Text length l
        temperature: tau applied to every similarity logit
        prompt_length: m prompt tokens per injected layer
        prompt_depth: Number of leading blocks that receive fresh prompts
        prompt_mode: "replace" the previous layer's prompt outputs, or "append" new ones
    """

    image_size: int = 64
    patch_size: int = 8
    image_width: int = 64
    text_width: int = 64
    embed_dim: int = 32
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    vocab_size: int = 64
    context_length: int = 8
    temperature: float = 0.07
    prompt_length: int = 2
    prompt_depth: int = 3
    prompt_mode: str = "replace"

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    def validate(self) -> None:
        if self.image_size % self.patch_size:
            raise ContractError(f"image size {self.image_size} is not divisible by patch size {self.patch_size}")
        if self.embed_dim > min(self.image_width, self.text_width):
            raise ContractError(f"embed_dim {self.embed_dim} exceeds min(c_I, c_T)")
        if self.temperature <= 0:
            raise ContractError(f"temperature must be positive, got {self.temperature}")
        if self.image_width % self.heads or self.text_width % self.heads:
            raise ContractError(f"widths must be divisible by {self.heads} heads")
        if self.prompt_length < 1:
            raise ContractError(f"prompt length must be at least 1, got {self.prompt_length}")
        if not 1 <= self.prompt_depth <= self.depth:
            raise ContractError(f"prompt depth must lie in [1, {self.depth}], got {self.prompt_depth}")
        if self.prompt_mode not in ("replace", "append"):
            raise ContractError(f"prompt mode must be 'replace' or 'append', got {self.prompt_mode}")

    def to_dict(self) -> Dict[str, Union[int, float, str]]:
        return asdict(self)


def couple_prompts(text_prompts: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """
    Map textual prompts to visual prompts, p_V = phi(p_T).

    Args:
        text_prompts: m x c_T
        weight: c_T x c_I
        bias: c_I, optional

    Raises:
        ShapeError: If the widths do not chain
    """
    if text_prompts.shape[-1] != weight.shape[0]:
        raise ShapeError(f"coupling expects width {weight.shape[0]}, prompts have {text_prompts.shape[-1]}")
    visual = text_prompts @ weight
    return visual if bias is None else visual + bias


@dataclass
class PromptSet:
    """
    Learnable textual prompts per injected depth and the coupling maps to the image tower.

    Visual prompts are always derived through `visual_prompt`; they are never
    stored as trainable state.
    """

    text_prompts: List[Tensor]
    coupling_weights: List[Tensor]
    coupling_biases: List[Tensor]

    @classmethod
    def initialize(cls, config: EncoderConfig, seed: int, std: float = 0.02) -> "PromptSet":
        rng = np.random.default_rng([seed, 7919])
        depth, m = config.prompt_depth, config.prompt_length
        text_prompts = [Tensor(rng.normal(0.0, std, (m, config.text_width)), requires_grad=True) for _ in range(depth)]
        weights = [
            Tensor(rng.normal(0.0, config.text_width ** -0.5, (config.text_width, config.image_width)), requires_grad=True)
            for _ in range(depth)
        ]
        biases = [Tensor(np.zeros(config.image_width), requires_grad=True) for _ in range(depth)]
        return cls(text_prompts, weights, biases)

    @property
    def depth(self) -> int:
        return len(self.text_prompts)

    @property
    def length(self) -> int:
        return self.text_prompts[0].shape[0]

    def visual_prompt(self, layer: int) -> Tensor:
        return couple_prompts(self.text_prompts[layer], self.coupling_weights[layer], self.coupling_biases[layer])

    def parameters(self) -> List[Tensor]:
        return [*self.text_prompts, *self.coupling_weights, *self.coupling_biases]

    def detached(self) -> "PromptSet":
        """Constant copy, used where prompt gradients are not needed (Grad-CAM, evaluation)."""
        return PromptSet(
            [t.detach() for t in self.text_prompts],
            [t.detach() for t in self.coupling_weights],
            [t.detach() for t in self.coupling_biases],
        )

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {}
        for i in range(self.depth):
            state[f"prompts.{i}.text"] = self.text_prompts[i].data
            state[f"prompts.{i}.coupling.weight"] = self.coupling_weights[i].data
            state[f"prompts.{i}.coupling.bias"] = self.coupling_biases[i].data
        return state

    @classmethod
    def from_state_dict(cls, state: Dict[str, np.ndarray], trainable: bool = False) -> "PromptSet":
        depth = len([k for k in state if k.endswith(".text")])
        return cls(
            [Tensor(state[f"prompts.{i}.text"], requires_grad=trainable) for i in range(depth)],
            [Tensor(state[f"prompts.{i}.coupling.weight"], requires_grad=trainable) for i in range(depth)],
            [Tensor(state[f"prompts.{i}.coupling.bias"], requires_grad=trainable) for i in range(depth)],
        )


class ImageEncoding(NamedTuple):
    """Image features and, when requested, the tapped activation A (b x c_I x n)."""

    features: Tensor
    activation: Optional[Tensor]


def _block_names(prefix: str, i: int) -> Dict[str, str]:
    base = f"{prefix}.blocks.{i}"
    return {
        "ln1.gain": f"{base}.ln1.gain",
        "ln1.bias": f"{base}.ln1.bias",
        "qkv.weight": f"{base}.attn.qkv.weight",
        "qkv.bias": f"{base}.attn.qkv.bias",
        "out.weight": f"{base}.attn.out.weight",
        "out.bias": f"{base}.attn.out.bias",
        "ln2.gain": f"{base}.ln2.gain",
        "ln2.bias": f"{base}.ln2.bias",
        "fc1.weight": f"{base}.mlp.fc1.weight",
        "fc1.bias": f"{base}.mlp.fc1.bias",
        "fc2.weight": f"{base}.mlp.fc2.weight",
        "fc2.bias": f"{base}.mlp.fc2.bias",
    }


def init_weights(config: EncoderConfig, seed: int) -> Dict[str, np.ndarray]:
    """Deterministic random initialization of every backbone weight."""
    config.validate()
    rng = np.random.default_rng(seed)
    weights: Dict[str, np.ndarray] = {}
    for prefix, width in (("visual", config.image_width), ("text", config.text_width)):
        hidden = width * config.mlp_ratio
        for i in range(config.depth):
            names = _block_names(prefix, i)
            weights[names["ln1.gain"]] = np.ones(width)
            weights[names["ln1.bias"]] = np.zeros(width)
            weights[names["qkv.weight"]] = rng.normal(0.0, width ** -0.5, (width, 3 * width))
            weights[names["qkv.bias"]] = np.zeros(3 * width)
            weights[names["out.weight"]] = rng.normal(0.0, (2 * config.depth * width) ** -0.5, (width, width))
            weights[names["out.bias"]] = np.zeros(width)
            weights[names["ln2.gain"]] = np.ones(width)
            weights[names["ln2.bias"]] = np.zeros(width)
            weights[names["fc1.weight"]] = rng.normal(0.0, width ** -0.5, (width, hidden))
            weights[names["fc1.bias"]] = np.zeros(hidden)
            weights[names["fc2.weight"]] = rng.normal(0.0, (2 * config.depth * hidden) ** -0.5, (hidden, width))
            weights[names["fc2.bias"]] = np.zeros(width)
        weights[f"{prefix}.ln_post.gain"] = np.ones(width)
        weights[f"{prefix}.ln_post.bias"] = np.zeros(width)
        weights[f"{prefix}.proj"] = rng.normal(0.0, width ** -0.5, (width, config.embed_dim))

    patch_dim = 3 * config.patch_size * config.patch_size
    weights["visual.patch_embed"] = rng.normal(0.0, patch_dim ** -0.5, (patch_dim, config.image_width))
    weights["visual.cls"] = rng.normal(0.0, config.image_width ** -0.5, (config.image_width,))
    weights["visual.pos"] = rng.normal(0.0, 0.02, (config.num_patches + 1, config.image_width))
    weights["visual.ln_pre.gain"] = np.ones(config.image_width)
    weights["visual.ln_pre.bias"] = np.zeros(config.image_width)
    weights["text.token_embed"] = rng.normal(0.0, 0.02, (config.vocab_size, config.text_width))
    weights["text.pos"] = rng.normal(0.0, 0.01, (config.context_length, config.text_width))
    return weights


class DualEncoder:
    """
    Image encoder F_I and text encoder F_T with optional prompt injection.

    A frozen encoder holds read-only weight arrays that never receive gradients;
    `stats` counts encoded images and texts for auditing; the counters are
    shared by every thread using the encoder.
    """

    def __init__(self, config: EncoderConfig, weights: Dict[str, np.ndarray], frozen: bool = False):
        config.validate()
        self.config = config
        self.frozen = frozen
        self.params: Dict[str, Tensor] = {}
        for name in sorted(weights):
            tensor = Tensor(weights[name], requires_grad=not frozen)
            if frozen:
                tensor.data.flags.writeable = False
            self.params[name] = tensor
        self._stats = {"image_passes": 0, "text_passes": 0}
        self._stats_lock = threading.Lock()

    @classmethod
    def initialize(cls, config: EncoderConfig, seed: int) -> "DualEncoder":
        return cls(config, init_weights(config, seed), frozen=False)

    def freeze(self) -> "DualEncoder":
        """Return a frozen copy sharing no storage with this encoder."""
        return DualEncoder(self.config, self.state_dict(), frozen=True)

    @property
    def stats(self) -> Dict[str, int]:
        """Snapshot of the pass counters."""
        with self._stats_lock:
            return dict(self._stats)

    def _count(self, key: str, amount: int) -> None:
        with self._stats_lock:
            self._stats[key] += amount

    def parameters(self) -> List[Tensor]:
        return [] if self.frozen else list(self.params.values())

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: tensor.data.copy() for name, tensor in self.params.items()}

    def fingerprint(self) -> str:
        """SHA-256 over the sorted named weights; unchanged while the encoder stays frozen."""
        digest = hashlib.sha256()
        for name in sorted(self.params):
            digest.update(name.encode("utf-8"))
            digest.update(np.ascontiguousarray(self.params[name].data, dtype="<f8").tobytes())
        return digest.hexdigest()

    # ------------------------------------------------------------- building blocks
    def _affine_norm(self, x: Tensor, gain: str, bias: str) -> Tensor:
        return layer_norm(x) * self.params[gain] + self.params[bias]

    def _attention(self, x: Tensor, names: Dict[str, str], mask: Optional[np.ndarray]) -> Tensor:
        b, s, c = x.shape
        heads = self.config.heads
        dh = c // heads
        qkv = x @ self.params[names["qkv.weight"]] + self.params[names["qkv.bias"]]
        qkv = qkv.reshape(b, s, 3, heads, dh).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
        if mask is not None:
            scores = scores + mask
        attended = softmax(scores, axis=-1) @ v
        merged = attended.transpose(0, 2, 1, 3).reshape(b, s, c)
        return merged @ self.params[names["out.weight"]] + self.params[names["out.bias"]]

    def _block(self, x: Tensor, names: Dict[str, str], mask: Optional[np.ndarray] = None, tap_from: Optional[int] = None):
        h = self._affine_norm(x, names["ln1.gain"], names["ln1.bias"])
        activation = None
        if tap_from is not None:
            activation = h[:, tap_from:, :].transpose(0, 2, 1).watch()
            h = concat([h[:, :tap_from, :], activation.transpose(0, 2, 1)], axis=1)
        x = x + self._attention(h, names, mask)
        h = self._affine_norm(x, names["ln2.gain"], names["ln2.bias"])
        hidden = (h @ self.params[names["fc1.weight"]] + self.params[names["fc1.bias"]]).gelu()
        x = x + hidden @ self.params[names["fc2.weight"]] + self.params[names["fc2.bias"]]
        return x, activation

    def _inject(self, x: Tensor, prompt: Tensor, offset: int, layer: int) -> Tensor:
        """Insert (layer 0 / append mode) or overwrite (replace mode) prompt positions at offset."""
        b = x.shape[0]
        m = prompt.shape[0]
        batch_prompt = prompt.reshape(1, m, prompt.shape[1]).broadcast_to((b, m, prompt.shape[1]))
        if layer == 0 or self.config.prompt_mode == "append":
            return concat([x[:, :offset, :], batch_prompt, x[:, offset:, :]], axis=1)
        return concat([x[:, :offset, :], batch_prompt, x[:, offset + m:, :]], axis=1)

    # ------------------------------------------------------------------ towers
    def patchify(self, images: np.ndarray) -> np.ndarray:
        cfg = self.config
        b = images.shape[0]
        g, p = cfg.grid, cfg.patch_size
        return images.reshape(b, 3, g, p, g, p).transpose(0, 2, 4, 1, 3, 5).reshape(b, g * g, 3 * p * p)

    def encode_image(self, images: Union[np.ndarray, Tensor], prompts: Optional[PromptSet] = None, tap: bool = False) -> ImageEncoding:
        """
        Encode a batch of images, Z = F_I({CLS, p_V, e_1..e_n}).

        Args:
            images: (b, 3, h, w) array
            prompts: Optional prompt set; visual prompts are coupled from its textual prompts
            tap: Record the final block's patch activation for Grad-CAM

        Returns:
            ImageEncoding with unit-norm (b, d) features and the (b, c_I, n) activation

        Raises:
            ShapeError: If the images or prompts do not match the configuration
        """
        cfg = self.config
        data = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float64)
        if data.ndim == 3:
            data = data[None]
        if data.shape[1:] != (3, cfg.image_size, cfg.image_size):
            raise ShapeError(f"expected images (b, 3, {cfg.image_size}, {cfg.image_size}), got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ShapeError("images must be finite")
        self._check_prompts(prompts)
        b = data.shape[0]
        self._count("image_passes", b)

        x = Tensor(self.patchify(data)) @ self.params["visual.patch_embed"]
        cls = self.params["visual.cls"].reshape(1, 1, cfg.image_width).broadcast_to((b, 1, cfg.image_width))
        x = concat([cls, x], axis=1) + self.params["visual.pos"]
        x = self._affine_norm(x, "visual.ln_pre.gain", "visual.ln_pre.bias")

        prompt_count = 0
        activation = None
        for i in range(cfg.depth):
            if prompts is not None and i < prompts.depth:
                x = self._inject(x, prompts.visual_prompt(i), 1, i)
                if i == 0 or cfg.prompt_mode == "append":
                    prompt_count += prompts.length
            tap_from = 1 + prompt_count if tap and i == cfg.depth - 1 else None
            x, tapped = self._block(x, _block_names("visual", i), tap_from=tap_from)
            activation = tapped if tapped is not None else activation

        pooled = self._affine_norm(x[:, 0, :], "visual.ln_post.gain", "visual.ln_post.bias")
        return ImageEncoding(l2_normalize(pooled @ self.params["visual.proj"]), activation)

    def encode_text(self, tokens: np.ndarray, prompts: Optional[PromptSet] = None) -> Tensor:
        """
        Encode token sequences, Z = F_T({p_T, t_1..t_l}), pooled at the end-of-text token.

        Args:
            tokens: (b, l) int array; padding id 0 follows the end-of-text token
            prompts: Optional prompt set

        Returns:
            Unit-norm (b, d) features

        Raises:
            VocabularyError: If a token id is outside the vocabulary
        """
        cfg = self.config
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None]
        if tokens.shape[1] != cfg.context_length:
            raise ShapeError(f"expected {cfg.context_length} tokens per text, got {tokens.shape[1]}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
            raise VocabularyError(f"token ids must lie in [0, {cfg.vocab_size}), got [{tokens.min()}, {tokens.max()}]")
        self._check_prompts(prompts)
        b = tokens.shape[0]
        self._count("text_passes", b)

        x = self.params["text.token_embed"][tokens] + self.params["text.pos"]
        prompt_count = 0
        for i in range(cfg.depth):
            if prompts is not None and i < prompts.depth:
                x = self._inject(x, prompts.text_prompts[i], 0, i)
                if i == 0 or cfg.prompt_mode == "append":
                    prompt_count += prompts.length
            s = x.shape[1]
            causal = np.triu(np.full((s, s), _MASK_VALUE), k=1)
            x, _ = self._block(x, _block_names("text", i), mask=causal)

        eot = (tokens != PAD_ID).sum(axis=1) - 1 + prompt_count
        pooled = self._affine_norm(x[np.arange(b), eot, :], "text.ln_post.gain", "text.ln_post.bias")
        return l2_normalize(pooled @ self.params["text.proj"])

    def _check_prompts(self, prompts: Optional[PromptSet]) -> None:
        if prompts is None:
            return
        cfg = self.config
        if prompts.depth > cfg.depth:
            raise ShapeError(f"{prompts.depth} prompt layers exceed encoder depth {cfg.depth}")
        if prompts.text_prompts[0].shape[1] != cfg.text_width:
            raise ShapeError(f"text prompts have width {prompts.text_prompts[0].shape[1]}, c_T is {cfg.text_width}")
        if prompts.coupling_weights[0].shape != (cfg.text_width, cfg.image_width):
            raise ShapeError(f"coupling has shape {prompts.coupling_weights[0].shape}, expected ({cfg.text_width}, {cfg.image_width})")


def zero_shot_predict(image_features: np.ndarray, class_features: np.ndarray, temperature: float = 0.07) -> np.ndarray:
    """
    Class probabilities softmax(sim(Z_I, Z_T^y) / tau) over k classes.

    Args:
        image_features: (d,) or (b, d) unit-norm features
        class_features: (k, d) unit-norm features
        temperature: tau

    Returns:
        (k,) or (b, k) probabilities
    """
    image_features = np.asarray(image_features, dtype=np.float64)
    class_features = np.asarray(class_features, dtype=np.float64)
    if class_features.ndim != 2 or class_features.shape[0] < 1:
        raise ContractError("zero-shot prediction needs at least one class feature")
    logits = image_features @ class_features.T / temperature
    logits = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(logits)
    return exp / exp.sum(axis=-1, keepdims=True)


def encode_texts(encoder: DualEncoder, tokens: np.ndarray, prompts: Optional[PromptSet] = None) -> np.ndarray:
    """Text features as a constant array, computed without building a graph."""
    with no_grad():
        detached = prompts.detached() if prompts is not None else None
        return encoder.encode_text(tokens, detached).data.copy()


def encode_images(
    encoder: DualEncoder, images: np.ndarray, prompts: Optional[PromptSet] = None, batch_size: int = 64
) -> np.ndarray:
    """Image features as a constant array, encoded in chunks without building a graph."""
    detached = prompts.detached() if prompts is not None else None
    chunks = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            chunks.append(encoder.encode_image(images[start:start + batch_size], detached).features.data.copy())
    if not chunks:
        return np.zeros((0, encoder.config.embed_dim))
    return np.concatenate(chunks, axis=0)
