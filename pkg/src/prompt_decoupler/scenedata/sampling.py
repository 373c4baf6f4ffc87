"""
Training-subset selection: few-shot, base/novel partition and random fractions.

All selections are pure functions of their inputs and the seed, and only ever
draw from the training pool, never from the held-out test split.
"""
import logging
import math
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from prompt_decoupler.errors import ContractError, DataError
from prompt_decoupler.scenedata.generator import SceneDataset, SceneSample

logger = logging.getLogger(__name__)


def _by_class(samples: Sequence[SceneSample]) -> Dict[int, List[SceneSample]]:
    groups: Dict[int, List[SceneSample]] = {}
    for sample in samples:
        groups.setdefault(sample.label, []).append(sample)
    return groups


def few_shot(
    dataset: SceneDataset, shots: int, seed: int, classes: Optional[Sequence[int]] = None
) -> List[SceneSample]:
    """
    Draw exactly `shots` training samples per class.

    Args:
        dataset: Dataset whose training pool is sampled
        shots: Samples per class
        seed: Selection seed
        classes: Restrict to these classes (e.g. the base half); all classes by default

    Returns:
        Selected samples ordered by class, then sample id

    Raises:
        ContractError: If shots is not positive
        DataError: If a class has fewer than `shots` training samples
    """
    if shots < 1:
        raise ContractError(f"shots must be positive, got {shots}")
    classes = list(range(dataset.spec.num_classes)) if classes is None else sorted(classes)
    groups = _by_class(dataset.train)
    rng = np.random.default_rng([seed, shots])
    selected: List[SceneSample] = []
    for cls in classes:
        pool = groups.get(cls, [])
        if len(pool) < shots:
            raise DataError(f"class {cls} has {len(pool)} training samples, {shots} shots requested")
        picks = np.sort(rng.choice(len(pool), size=shots, replace=False))
        selected.extend(pool[i] for i in picks)
    logger.info(f"Selected {shots}-shot subset: {len(selected)} samples over {len(classes)} classes")
    return selected


def split_base_novel(num_classes: int, seed: int) -> Tuple[List[int], List[int]]:
    """
    Partition the classes into equal base and novel halves.

    Raises:
        ContractError: If num_classes is odd
    """
    if num_classes % 2:
        raise ContractError(f"base/novel split needs an even class count, got {num_classes}")
    order = np.random.default_rng(seed).permutation(num_classes)
    half = num_classes // 2
    base = sorted(int(c) for c in order[:half])
    novel = sorted(int(c) for c in order[half:])
    return base, novel


def subset_fraction(samples: Sequence[SceneSample], fraction: float, seed: int) -> List[SceneSample]:
    """
    Class-stratified uniform subset of floor(fraction * N) samples.

    Raises:
        ContractError: If fraction is outside (0, 1]
    """
    if not 0.0 < fraction <= 1.0:
        raise ContractError(f"fraction must lie in (0, 1], got {fraction}")
    target = int(math.floor(fraction * len(samples) + 1e-9))
    groups = _by_class(samples)
    classes = sorted(groups)
    quotas = {c: int(math.floor(fraction * len(groups[c]) + 1e-9)) for c in classes}
    rng = np.random.default_rng([seed, int(round(fraction * 1e6))])
    remainder = target - sum(quotas.values())
    for position in rng.permutation(len(classes)):
        if remainder <= 0:
            break
        cls = classes[int(position)]
        if quotas[cls] < len(groups[cls]):
            quotas[cls] += 1
            remainder -= 1
    selected: List[SceneSample] = []
    for cls in classes:
        picks = np.sort(rng.choice(len(groups[cls]), size=quotas[cls], replace=False))
        selected.extend(groups[cls][i] for i in picks)
    logger.info(f"Selected {fraction:.0%} subset: {len(selected)} of {len(samples)} samples")
    return selected


def restrict_to_classes(samples: Sequence[SceneSample], classes: Sequence[int]) -> List[SceneSample]:
    """Samples whose primary label is in classes."""
    allowed = set(classes)
    return [s for s in samples if s.label in allowed]
