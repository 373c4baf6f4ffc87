"""
Versioned checkpoint files for backbone weights and learned prompts.

Layout: magic b"PDCK", then format version and metadata length as
little-endian uint32, then UTF-8 JSON metadata with sorted keys, then every
array's float64 little-endian bytes in the order listed in metadata["arrays"].
Arrays are sorted by name, so equal contents always produce identical bytes.
"""
import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, Tuple, Union

import numpy as np

from prompt_decoupler.encoder.model import DualEncoder, EncoderConfig, PromptSet
from prompt_decoupler.errors import ConfigError, FormatError, ResolutionError
from prompt_decoupler.scenedata.storage import write_atomic

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"PDCK"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sII")

BACKBONE_KIND = "backbone"
PROMPTS_KIND = "prompts"

BACKBONE_FIELDS = (
    "image_size", "patch_size", "image_width", "text_width", "embed_dim", "depth", "heads", "mlp_ratio",
    "vocab_size", "context_length",
)
PROMPT_FIELDS = ("image_width", "text_width", "prompt_length", "prompt_depth", "prompt_mode")


def encode_checkpoint(kind: str, arrays: Dict[str, np.ndarray], metadata: Dict[str, Any]) -> bytes:
    table = []
    body = []
    for name in sorted(arrays):
        data = np.ascontiguousarray(arrays[name], dtype="<f8")
        table.append({"name": name, "shape": list(data.shape)})
        body.append(data.tobytes())
    meta = dict(metadata, kind=kind, arrays=table)
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(meta_bytes)) + meta_bytes + b"".join(body)


def decode_checkpoint(payload: bytes, source: str = "<bytes>") -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    """
    Parse checkpoint bytes.

    Returns:
        Metadata dict and the named arrays

    Raises:
        FormatError: On a bad magic, an unsupported version or truncated content
    """
    if len(payload) < _HEADER.size:
        raise FormatError(f"{source}: truncated checkpoint header")
    magic, version, meta_len = _HEADER.unpack_from(payload)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{source}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    offset = _HEADER.size
    try:
        meta = json.loads(payload[offset:offset + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{source}: unreadable metadata: {e}") from e
    offset += meta_len
    arrays: Dict[str, np.ndarray] = {}
    for entry in meta.get("arrays", []):
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + 8 * count
        if end > len(payload):
            raise FormatError(f"{source}: array {entry['name']} is truncated")
        arrays[entry["name"]] = np.frombuffer(payload[offset:end], dtype="<f8").reshape(shape).astype(np.float64)
        offset = end
    if offset != len(payload):
        raise FormatError(f"{source}: {len(payload) - offset} trailing bytes")
    return meta, arrays


def _read(path: Union[str, Path], kind: str) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise ResolutionError(f"checkpoint not found: {path}")
    meta, arrays = decode_checkpoint(path.read_bytes(), source=str(path))
    if meta.get("kind") != kind:
        raise FormatError(f"{path}: expected a {kind} checkpoint, found {meta.get('kind')}")
    return meta, arrays


def check_config(stored: Dict[str, Any], expected: EncoderConfig, source: str, keys: Tuple[str, ...]) -> None:
    """
    Raises:
        ConfigError: Naming every encoder field on which the checkpoint disagrees with the run
    """
    current = expected.to_dict()
    mismatched = sorted(k for k in keys if k in stored and stored[k] != current[k])
    if mismatched:
        details = ", ".join(f"encoder.{k}: checkpoint {stored[k]} vs config {current[k]}" for k in mismatched)
        raise ConfigError(f"{source} does not match the configured encoder ({details})")


def save_backbone(path: Union[str, Path], encoder: DualEncoder, extra: Dict[str, Any] = None) -> Path:
    path = Path(path)
    metadata = {"encoder": encoder.config.to_dict(), "fingerprint": encoder.fingerprint(), **(extra or {})}
    write_atomic(path, encode_checkpoint(BACKBONE_KIND, encoder.state_dict(), metadata))
    logger.info(f"Saved backbone checkpoint to {path}")
    return path


def load_backbone(path: Union[str, Path], expected: EncoderConfig = None) -> DualEncoder:
    """
    Load a backbone checkpoint as a frozen encoder.

    Args:
        path: Checkpoint file
        expected: When given, the stored encoder geometry must match it

    Raises:
        ResolutionError: If the file is missing
        FormatError: If the file is not a valid backbone checkpoint
        ConfigError: If the geometry differs from expected
    """
    meta, arrays = _read(path, BACKBONE_KIND)
    config = EncoderConfig(**meta["encoder"])
    if expected is not None:
        check_config(meta["encoder"], expected, str(path), BACKBONE_FIELDS)
        config = expected
    encoder = DualEncoder(config, arrays, frozen=True)
    if meta.get("fingerprint") and meta["fingerprint"] != encoder.fingerprint():
        raise FormatError(f"{path}: weights do not match the stored fingerprint")
    logger.info(f"Loaded frozen backbone from {path}")
    return encoder


def save_prompts(path: Union[str, Path], prompts: PromptSet, config: EncoderConfig, extra: Dict[str, Any] = None) -> Path:
    path = Path(path)
    metadata = {"encoder": config.to_dict(), **(extra or {})}
    write_atomic(path, encode_checkpoint(PROMPTS_KIND, prompts.state_dict(), metadata))
    logger.info(f"Saved prompts to {path}")
    return path


def load_prompts(path: Union[str, Path], expected: EncoderConfig = None, trainable: bool = False) -> PromptSet:
    meta, arrays = _read(path, PROMPTS_KIND)
    if expected is not None:
        check_config(meta["encoder"], expected, str(path), PROMPT_FIELDS)
    return PromptSet.from_state_dict(arrays, trainable=trainable)
