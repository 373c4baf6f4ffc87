"""
On-disk layout of ShapeScenes datasets and mask files.

A dataset directory holds:

    manifest.txt      plain text; header lines "key value", then one row per sample:
                      id split labels bg_class seed image_file image_offset mask_file mask_offset
                      (labels comma-separated, "-" when empty)
    images/NNNNNN.rgb raw 8-bit RGB, row-major, interleaved R,G,B per pixel (h*w*3 bytes)
    masks/NNNNNN.msk  mask file, see `write_mask_file`

Mask files start with the magic b"PDMK", then h and w as little-endian uint32,
then h*w bytes, one per pixel, 0 (background) or 255 (foreground), row-major.
"""
import logging
import os
import struct
import tempfile
from dataclasses import fields
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np

from prompt_decoupler.errors import FormatError, ResolutionError
from prompt_decoupler.scenedata.generator import DatasetSpec, SceneDataset, SceneSample

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.txt"
MASK_MAGIC = b"PDMK"
_MASK_HEADER = struct.Struct("<4sII")


def write_atomic(path: Union[str, Path], payload: bytes) -> None:
    """Write bytes to path through a temporary file and an atomic rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=str(path.parent))
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_mask(mask: np.ndarray) -> bytes:
    binary = np.asarray(mask)
    h, w = binary.shape
    body = np.where(binary > 0, 255, 0).astype(np.uint8).tobytes()
    return _MASK_HEADER.pack(MASK_MAGIC, h, w) + body


def decode_mask(payload: bytes, source: str = "<bytes>") -> np.ndarray:
    """
    Parse a mask file.

    Returns:
        uint8 array (h, w) of {0, 1}

    Raises:
        FormatError: On a bad magic, truncation, or a byte other than 0/255
    """
    if len(payload) < _MASK_HEADER.size:
        raise FormatError(f"{source}: truncated header ({len(payload)} bytes)")
    magic, h, w = _MASK_HEADER.unpack_from(payload)
    if magic != MASK_MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}")
    body = np.frombuffer(payload, dtype=np.uint8, offset=_MASK_HEADER.size)
    if body.size != h * w:
        raise FormatError(f"{source}: expected {h * w} mask bytes, found {body.size}")
    invalid = np.flatnonzero((body != 0) & (body != 255))
    if invalid.size:
        position = int(invalid[0])
        row, col = divmod(position, w)
        raise FormatError(
            f"{source}: invalid mask byte {int(body[position])} at offset {_MASK_HEADER.size + position} (row {row}, col {col})"
        )
    return (body.reshape(h, w) == 255).astype(np.uint8)


def write_mask_file(path: Union[str, Path], mask: np.ndarray) -> None:
    write_atomic(path, encode_mask(mask))


def read_mask_file(path: Union[str, Path]) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise ResolutionError(f"mask file not found: {path}")
    return decode_mask(path.read_bytes(), source=str(path))


class DatasetStore:
    """
    Saves and loads SceneDataset directories.

    The store is single-writer; the manifest is written last, so a directory
    without a manifest is an incomplete save.
    """

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)

    def save(self, dataset: SceneDataset) -> Path:
        (self.root / "images").mkdir(parents=True, exist_ok=True)
        (self.root / "masks").mkdir(parents=True, exist_ok=True)
        spec = dataset.spec
        lines = [f"version {MANIFEST_VERSION}"]
        for spec_field in fields(DatasetSpec):
            lines.append(f"{spec_field.name} {getattr(spec, spec_field.name)}")
        samples = dataset.samples()
        lines.append(f"count {len(samples)}")
        for sample in samples:
            image_name = f"images/{sample.sample_id:06d}.rgb"
            mask_name = f"masks/{sample.sample_id:06d}.msk"
            pixels = np.clip(np.round(sample.image * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
            write_atomic(self.root / image_name, pixels.tobytes())
            write_mask_file(self.root / mask_name, sample.gt_mask)
            labels = ",".join(str(c) for c in sample.labels) or "-"
            lines.append(
                f"{sample.sample_id} {sample.split} {labels} {sample.bg_class} {sample.seed} {image_name} 0 {mask_name} 0"
            )
        write_atomic(self.root / MANIFEST_NAME, ("\n".join(lines) + "\n").encode("utf-8"))
        logger.info(f"Saved {len(samples)} samples to {self.root}")
        return self.root

    def load(self) -> SceneDataset:
        """
        Load a dataset saved by `save`.

        Raises:
            ResolutionError: If the manifest is missing
            FormatError: On a version mismatch, a malformed row or a corrupt file
        """
        manifest = self.root / MANIFEST_NAME
        if not manifest.exists():
            raise ResolutionError(f"dataset manifest not found: {manifest}")
        lines = manifest.read_text(encoding="utf-8").splitlines()
        header, rows = self._parse_header(lines)
        version = int(header.get("version", -1))
        if version != MANIFEST_VERSION:
            raise FormatError(f"{manifest}: manifest version {version}, expected {MANIFEST_VERSION}")
        spec = self._spec_from_header(header)
        count = int(header["count"])
        if len(rows) != count:
            raise FormatError(f"{manifest}: header announces {count} samples, found {len(rows)} rows")
        dataset = SceneDataset(spec=spec)
        size = spec.image_size
        for line_no, row in rows:
            parts = row.split()
            if len(parts) != 9:
                raise FormatError(f"{manifest}:{line_no}: expected 9 fields, found {len(parts)}")
            sample_id, split, labels, bg_class, seed, image_name, image_offset, mask_name, mask_offset = parts
            image_path = self.root / image_name
            if not image_path.exists():
                raise FormatError(f"{manifest}:{line_no}: missing image file {image_name}")
            raw = image_path.read_bytes()[int(image_offset):]
            if len(raw) != size * size * 3:
                raise FormatError(f"{image_path}: expected {size * size * 3} bytes, found {len(raw)}")
            mask_path = self.root / mask_name
            if not mask_path.exists():
                raise FormatError(f"{manifest}:{line_no}: missing mask file {mask_name}")
            mask = decode_mask(mask_path.read_bytes()[int(mask_offset):], source=str(mask_path))
            image = np.frombuffer(raw, dtype=np.uint8).reshape(size, size, 3).transpose(2, 0, 1).astype(np.float64) / 255.0
            sample = SceneSample(
                sample_id=int(sample_id),
                image=image,
                labels=tuple(int(c) for c in labels.split(",")) if labels != "-" else (),
                gt_mask=mask,
                bg_class=int(bg_class),
                seed=int(seed),
                split=split,
            )
            (dataset.test if split == "test" else dataset.train).append(sample)
        logger.info(f"Loaded {count} samples from {self.root}")
        return dataset

    @staticmethod
    def _parse_header(lines: List[str]) -> Tuple[Dict[str, str], List[Tuple[int, str]]]:
        header: Dict[str, str] = {}
        rows: List[Tuple[int, str]] = []
        in_rows = False
        for line_no, line in enumerate(lines, start=1):
            if not line.strip():
                continue
            if in_rows:
                rows.append((line_no, line))
                continue
            key, _, value = line.partition(" ")
            header[key] = value.strip()
            if key == "count":
                in_rows = True
        if "count" not in header:
            raise FormatError("manifest has no count line")
        return header, rows

    @staticmethod
    def _spec_from_header(header: Dict[str, str]) -> DatasetSpec:
        values = {}
        for spec_field in fields(DatasetSpec):
            if spec_field.name not in header:
                raise FormatError(f"manifest is missing dataset field {spec_field.name}")
            raw = header[spec_field.name]
            if spec_field.type in (bool, "bool"):
                values[spec_field.name] = raw == "True"
            else:
                values[spec_field.name] = int(raw)
        return DatasetSpec(**values)


def save_dataset(dataset: SceneDataset, path: Union[str, Path]) -> Path:
    return DatasetStore(path).save(dataset)


def load_dataset(path: Union[str, Path]) -> SceneDataset:
    return DatasetStore(path).load()
