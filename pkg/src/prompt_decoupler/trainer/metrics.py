"""
Evaluation metrics and the per-run metrics report.
"""
import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np

from prompt_decoupler.disentangle.masks import GradCamMasker
from prompt_decoupler.errors import ContractError, DomainError, ShapeError
from prompt_decoupler.scenedata.storage import write_atomic

logger = logging.getLogger(__name__)


def harmonic_mean(base: float, novel: float) -> float:
    """
    2ab / (a + b) of base and novel accuracies in percent.

    Raises:
        DomainError: If both accuracies are zero
        ContractError: If an accuracy is outside [0, 100]
    """
    for value in (base, novel):
        if not 0.0 <= value <= 100.0:
            raise ContractError(f"accuracies must lie in [0, 100], got {value}")
    if base == 0 and novel == 0:
        raise DomainError("harmonic mean is undefined when both accuracies are zero")
    return 2.0 * base * novel / (base + novel)


def accuracy(predictions: Sequence[int], labels: Sequence[int]) -> float:
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    if predictions.shape != labels.shape or predictions.size == 0:
        raise ShapeError(f"cannot score {predictions.shape} predictions against {labels.shape} labels")
    return float(100.0 * np.mean(predictions == labels))


def per_class_accuracy(predictions: Sequence[int], labels: Sequence[int]) -> Dict[int, float]:
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    return {int(c): float(100.0 * np.mean(predictions[labels == c] == c)) for c in np.unique(labels)}


def average_precision(scores: Sequence[float], positives: Sequence[bool]) -> float:
    """
    AP in percent: mean precision at the rank of each positive.

    Ranking is by descending score, ties in index order.
    """
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    order = np.argsort(-scores, kind="stable")
    hits = positives[order]
    if not hits.any():
        raise ContractError("average precision needs at least one positive")
    ranks = np.flatnonzero(hits) + 1
    precision = np.arange(1, len(ranks) + 1) / ranks
    return float(100.0 * precision.mean())


def mean_average_precision(scores: np.ndarray, label_sets: Sequence[Sequence[int]]) -> float:
    """
    Mean over classes of average precision.

    Args:
        scores: (N, k) finite scores
        label_sets: Positive classes per sample

    Returns:
        mAP in percent; classes without positives are left out with a warning
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] != len(label_sets):
        raise ShapeError(f"scores {scores.shape} do not match {len(label_sets)} label sets")
    if not np.all(np.isfinite(scores)):
        raise ContractError("scores must be finite")
    n, k = scores.shape
    targets = np.zeros((n, k), dtype=bool)
    for row, labels in enumerate(label_sets):
        targets[row, list(labels)] = True
    values = []
    for cls in range(k):
        if not targets[:, cls].any():
            logger.warning(f"class {cls} has no positives and is excluded from mAP")
            continue
        values.append(average_precision(scores[:, cls], targets[:, cls]))
    if not values:
        raise ContractError("no class has a positive sample")
    return float(np.mean(values))


def mask_iou(predicted: np.ndarray, target: np.ndarray) -> float:
    """Intersection over union of two binary masks; two empty masks count as identical."""
    a = np.asarray(predicted) > 0
    b = np.asarray(target) > 0
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def cam_foreground_iou(encoder, prompts, samples: Sequence, class_features: np.ndarray, beta: float = 0.5,
                       upsample: str = "bilinear", label_maps: Optional[Dict[int, int]] = None, batch_size: int = 16) -> float:
    """
    Mean IoU between the thresholded Grad-CAM mask and the ground-truth mask.

    Args:
        encoder: Frozen dual encoder
        prompts: PromptSet or None for the unprompted backbone
        samples: Scenes carrying gt_mask
        class_features: (k, d) text features for the label space
        beta: CAM threshold
        upsample: CAM upsampling scheme
        label_maps: Global to local class index map when class_features covers a subset
    """
    if not samples:
        raise ContractError("cam_foreground_iou needs at least one sample")
    masker = GradCamMasker(encoder, beta, upsample)
    scores = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        images = np.stack([s.image for s in chunk])
        labels = [[label_maps[c] if label_maps else c for c in s.labels] for s in chunk]
        for sample, mask in zip(chunk, masker.masks(images, class_features, labels, prompts)):
            scores.append(mask_iou(mask.values, sample.gt_mask))
    return float(np.mean(scores))


def rows_csv(rows: Sequence[Dict[str, Any]]) -> str:
    """CSV with a header taken from the first row; empty for no rows."""
    buffer = io.StringIO()
    if rows:
        writer = csv.DictWriter(buffer, fieldnames=list(rows[0].keys()), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return buffer.getvalue()


def write_rows_csv(path: Union[str, Path], rows: Sequence[Dict[str, Any]]) -> Path:
    path = Path(path)
    write_atomic(path, rows_csv(rows).encode("utf-8"))
    return path


@dataclass
class MetricsReport:
    """
    Outcome of one training or evaluation run.

    Accuracies and mAP are percentages; IoU lies in [0, 1]. `epochs` holds one
    loss-trace row per training epoch. `zero_shot_accuracy` is the unprompted
    reference of the headline metric (HM under base-to-novel, mAP
    under multi-object).
    """

    accuracy: Optional[float] = None
    per_class_accuracy: Dict[int, float] = field(default_factory=dict)
    base_accuracy: Optional[float] = None
    novel_accuracy: Optional[float] = None
    harmonic_mean: Optional[float] = None
    mean_average_precision: Optional[float] = None
    cam_iou: Optional[float] = None
    zero_shot_accuracy: Optional[float] = None
    pseudo_label_accuracy: Optional[float] = None
    epochs: List[Dict[str, float]] = field(default_factory=list)

    def validate(self) -> None:
        for name in ("accuracy", "base_accuracy", "novel_accuracy", "harmonic_mean", "mean_average_precision",
                     "zero_shot_accuracy", "pseudo_label_accuracy"):
            value = getattr(self, name)
            if value is not None and not 0.0 <= value <= 100.0:
                raise ContractError(f"{name} must lie in [0, 100], got {value}")

    def summary(self, extra: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
        data = {k: v for k, v in asdict(self).items() if k != "epochs" and v is not None}
        data["per_class_accuracy"] = {str(k): v for k, v in sorted(self.per_class_accuracy.items())}
        if self.epochs:
            data["final_loss"] = self.epochs[-1]["loss"]
            data["initial_loss"] = self.epochs[0]["loss"]
        data.update(extra or {})
        return data

    def epochs_csv(self) -> str:
        return rows_csv(self.epochs)

    def write_epochs_csv(self, path: Union[str, Path]) -> Path:
        return write_rows_csv(path, self.epochs)

    def write_summary_json(self, path: Union[str, Path], extra: Optional[Dict[str, Any]] = None) -> Path:
        path = Path(path)
        payload = json.dumps(self.summary(extra), indent=2, sort_keys=True) + "\n"
        write_atomic(path, payload.encode("utf-8"))
        return path
