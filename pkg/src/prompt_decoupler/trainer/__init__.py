"""Prompt tuning, evaluation metrics, protocols and ablation plans."""
from prompt_decoupler.trainer.metrics import (
    MetricsReport,
    accuracy,
    average_precision,
    cam_foreground_iou,
    harmonic_mean,
    mask_iou,
    mean_average_precision,
    per_class_accuracy,
)
from prompt_decoupler.trainer.prompt_tuner import PromptTuner, TrainConfig, TuneResult, evaluate
from prompt_decoupler.trainer.protocol import (
    ProtocolConfig,
    ProtocolResult,
    cam_iou_on_test,
    headline,
    run_protocol,
    score_prompts,
)
from prompt_decoupler.trainer.ablation import (
    PLAN_BUILDERS,
    AblationPlan,
    AblationRunner,
    AblationTable,
    DirectionCheck,
    PlanRow,
    build_plan,
    load_plan,
    parse_plan,
    run_ablation,
)

__all__ = [
    "PLAN_BUILDERS",
    "AblationPlan",
    "AblationRunner",
    "AblationTable",
    "DirectionCheck",
    "MetricsReport",
    "PlanRow",
    "PromptTuner",
    "ProtocolConfig",
    "ProtocolResult",
    "TrainConfig",
    "TuneResult",
    "accuracy",
    "average_precision",
    "build_plan",
    "cam_foreground_iou",
    "cam_iou_on_test",
    "evaluate",
    "harmonic_mean",
    "headline",
    "load_plan",
    "mask_iou",
    "mean_average_precision",
    "parse_plan",
    "per_class_accuracy",
    "run_ablation",
    "run_protocol",
    "score_prompts",
]
