"""
Evaluation protocols: few-shot, data fraction, base-to-novel and multi-object.
"""
import logging
from dataclasses import asdict, dataclass
from typing import Dict, NamedTuple, Optional

from prompt_decoupler.encoder.model import DualEncoder, PromptSet, encode_texts
from prompt_decoupler.errors import ConfigError, ContractError
from prompt_decoupler.losses import BackgroundSpace, LossWeights
from prompt_decoupler.scenedata.generator import SceneDataset
from prompt_decoupler.scenedata.sampling import few_shot, restrict_to_classes, split_base_novel, subset_fraction
from prompt_decoupler.scenedata.tokenizer import Tokenizer, render_foreground
from prompt_decoupler.trainer.metrics import MetricsReport, cam_foreground_iou, harmonic_mean
from prompt_decoupler.trainer.prompt_tuner import PromptTuner, TrainConfig, evaluate

logger = logging.getLogger(__name__)

SETTINGS = ("fewshot", "fraction", "base-to-novel", "multi-object")


@dataclass
class ProtocolConfig:
    """
    Which training subset is drawn and how the result is scored.

    Attributes:
        setting: "fewshot", "fraction", "base-to-novel" or "multi-object"
        shots: Samples per class for the few-shot style settings
        fraction: Share of the training pool for the fraction setting
        bg_classes: Size k_b of the background space
        cam_samples: Test samples scored for CAM/ground-truth IoU, 0 to skip
    """

    setting: str = "fewshot"
    shots: int = 16
    fraction: float = 1.0
    bg_classes: int = 25
    cam_samples: int = 0

    def validate(self) -> None:
        if self.setting not in SETTINGS:
            raise ContractError(f"setting must be one of {SETTINGS}, got {self.setting}")
        if self.shots < 1:
            raise ContractError(f"shots must be positive, got {self.shots}")
        if not 0.0 < self.fraction <= 1.0:
            raise ContractError(f"fraction must lie in (0, 1], got {self.fraction}")
        if self.cam_samples < 0:
            raise ContractError(f"cam_samples must be nonnegative, got {self.cam_samples}")

    def to_dict(self) -> Dict:
        return asdict(self)


class ProtocolResult(NamedTuple):
    prompts: PromptSet
    report: MetricsReport


def run_protocol(
    encoder: DualEncoder,
    dataset: SceneDataset,
    train_config: TrainConfig,
    weights: LossWeights,
    protocol: ProtocolConfig,
    seed: int,
) -> ProtocolResult:
    """
    Draw the training subset, tune prompts and score the held-out split.

    Args:
        encoder: Frozen backbone
        dataset: Generated dataset; only its training pool is ever trained on
        train_config: Prompt-tuning recipe
        weights: Loss coefficients
        protocol: Setting and subset parameters
        seed: Seeds subset selection and training

    Returns:
        ProtocolResult with trained prompts and a report holding loss traces,
        test metrics and the zero-shot reference

    Raises:
        ConfigError: If the multi-object setting is run on single-object data
    """
    protocol.validate()
    _check_setting(dataset, protocol.setting)
    spec = dataset.spec
    background = BackgroundSpace.first(protocol.bg_classes)
    multi_label = protocol.setting == "multi-object"
    tuner = PromptTuner(encoder, spec.class_names, train_config, weights, background, multi_label=multi_label)

    if protocol.setting == "base-to-novel":
        base, _ = split_base_novel(spec.num_classes, spec.split_seed)
        prompts, report = tuner.tune(few_shot(dataset, protocol.shots, seed, classes=base), seed, class_ids=base)
    elif protocol.setting == "fraction":
        prompts, report = tuner.tune(subset_fraction(dataset.train, protocol.fraction, seed), seed)
    else:
        prompts, report = tuner.tune(few_shot(dataset, protocol.shots, seed), seed)

    scored = score_prompts(encoder, prompts, dataset, protocol.setting)
    for name in ("accuracy", "per_class_accuracy", "base_accuracy", "novel_accuracy", "harmonic_mean", "mean_average_precision"):
        setattr(report, name, getattr(scored, name))
    report.zero_shot_accuracy = headline(score_prompts(encoder, None, dataset, protocol.setting))
    if protocol.setting == "base-to-novel":
        logger.info(
            f"Base-to-novel seed {seed}: base {report.base_accuracy:.2f}, novel {report.novel_accuracy:.2f}, "
            f"HM {report.harmonic_mean:.2f}"
        )
    if protocol.cam_samples:
        report.cam_iou = cam_iou_on_test(encoder, prompts, dataset, protocol.cam_samples, train_config.beta, train_config.upsample)
    report.validate()
    return ProtocolResult(prompts, report)


def _check_setting(dataset: SceneDataset, setting: str) -> None:
    if setting not in SETTINGS:
        raise ContractError(f"setting must be one of {SETTINGS}, got {setting}")
    if setting == "multi-object" and not dataset.spec.multi_object:
        raise ConfigError("the multi-object setting needs data.multi_object = true")


def score_prompts(encoder: DualEncoder, prompts: Optional[PromptSet], dataset: SceneDataset, setting: str = "fewshot") -> MetricsReport:
    """
    Test-split report of the backbone with optional prompts, no training involved.

    Base-to-novel scores each half in its own label space and adds the
    harmonic mean; multi-object reports mAP; every other setting top-1 accuracy.
    """
    _check_setting(dataset, setting)
    spec = dataset.spec
    names = spec.class_names
    if setting == "base-to-novel":
        base, novel = split_base_novel(spec.num_classes, spec.split_seed)
        report = MetricsReport()
        report.base_accuracy = evaluate(encoder, prompts, restrict_to_classes(dataset.test, base), names, base).accuracy
        report.novel_accuracy = evaluate(encoder, prompts, restrict_to_classes(dataset.test, novel), names, novel).accuracy
        report.harmonic_mean = harmonic_mean(report.base_accuracy, report.novel_accuracy)
        return report
    return evaluate(encoder, prompts, dataset.test, names, multi_label=setting == "multi-object")


def headline(report: MetricsReport) -> Optional[float]:
    """The metric a setting is judged by: HM, then mAP, then accuracy."""
    for name in ("harmonic_mean", "mean_average_precision", "accuracy"):
        value = getattr(report, name)
        if value is not None:
            return value
    return None


def cam_iou_on_test(encoder: DualEncoder, prompts: Optional[PromptSet], dataset: SceneDataset, count: int,
                    beta: float = 0.5, upsample: str = "bilinear") -> float:
    """CAM/ground-truth IoU over `count` test samples taken at an even stride."""
    stride = max(1, len(dataset.test) // count)
    samples = dataset.test[::stride][:count]
    tokenizer = Tokenizer(encoder.config.context_length)
    class_features = encode_texts(encoder, tokenizer.encode_batch([render_foreground(n) for n in dataset.spec.class_names]), prompts)
    return cam_foreground_iou(encoder, prompts, samples, class_features, beta, upsample)
