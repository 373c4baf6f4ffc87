"""
Unit tests for the evaluation protocols.
"""
from unittest.mock import patch

import pytest

from prompt_decoupler.errors import ConfigError, ContractError
from prompt_decoupler.losses import LossWeights
from prompt_decoupler.scenedata import split_base_novel
from prompt_decoupler.trainer import (
    MetricsReport,
    ProtocolConfig,
    TrainConfig,
    cam_iou_on_test,
    headline,
    run_protocol,
    score_prompts,
)
from prompt_decoupler.trainer import protocol as protocol_module


def _train_config(**overrides):
    return TrainConfig(**{"epochs": 1, "batch_size": 4, "mask_source": "oracle", **overrides})


def test_protocol_config_validation():
    """Test protocol parameter checks."""
    with pytest.raises(ContractError):
        ProtocolConfig(setting="zero-shot").validate()
    with pytest.raises(ContractError):
        ProtocolConfig(shots=0).validate()
    with pytest.raises(ContractError):
        ProtocolConfig(fraction=0.0).validate()
    with pytest.raises(ContractError):
        ProtocolConfig(cam_samples=-1).validate()


def test_multi_object_setting_needs_multi_object_data(frozen_encoder, dataset):
    """Test the setting/data consistency check."""
    with pytest.raises(ConfigError, match="data.multi_object"):
        score_prompts(frozen_encoder, None, dataset, "multi-object")
    with pytest.raises(ContractError):
        score_prompts(frozen_encoder, None, dataset, "zero-shot")


def test_headline_prefers_harmonic_mean_then_map():
    """Test the headline metric order."""
    assert headline(MetricsReport(accuracy=50.0, harmonic_mean=40.0)) == 40.0
    assert headline(MetricsReport(accuracy=50.0, mean_average_precision=30.0)) == 30.0
    assert headline(MetricsReport(accuracy=50.0)) == 50.0
    assert headline(MetricsReport()) is None


@patch("prompt_decoupler.trainer.protocol.evaluate")
def test_score_prompts_base_to_novel_scores_each_half_separately(mock_evaluate, frozen_encoder, dataset):
    """Test base-to-novel scoring in separate label spaces."""
    mock_evaluate.side_effect = [MetricsReport(accuracy=80.0), MetricsReport(accuracy=60.0)]
    report = score_prompts(frozen_encoder, None, dataset, "base-to-novel")

    base, novel = split_base_novel(dataset.spec.num_classes, dataset.spec.split_seed)
    (_, _, base_samples, _, base_ids), _ = mock_evaluate.call_args_list[0]
    (_, _, novel_samples, _, novel_ids), _ = mock_evaluate.call_args_list[1]
    assert base_ids == base and novel_ids == novel
    assert {s.label for s in base_samples} == set(base)
    assert {s.label for s in novel_samples} == set(novel)
    assert report.base_accuracy == 80.0
    assert report.novel_accuracy == 60.0
    assert report.harmonic_mean == pytest.approx(2 * 80.0 * 60.0 / 140.0)
    assert report.accuracy is None


def test_score_prompts_fewshot_reports_accuracy(frozen_encoder, dataset):
    """Test the plain accuracy path."""
    report = score_prompts(frozen_encoder, None, dataset)
    assert 0.0 <= report.accuracy <= 100.0
    assert report.harmonic_mean is None


def test_run_protocol_fewshot(frozen_encoder, dataset, mocker):
    """Test a tiny few-shot protocol run end to end."""
    spy = mocker.spy(protocol_module, "few_shot")
    prompts, report = run_protocol(
        frozen_encoder, dataset, _train_config(), LossWeights(), ProtocolConfig(shots=2, bg_classes=5, cam_samples=2), seed=1
    )
    spy.assert_called_once_with(dataset, 2, 1)
    assert prompts.depth == frozen_encoder.config.prompt_depth
    assert 0.0 <= report.accuracy <= 100.0
    assert 0.0 <= report.zero_shot_accuracy <= 100.0
    assert 0.0 <= report.cam_iou <= 1.0
    assert len(report.epochs) == 1


def test_run_protocol_fraction_uses_training_subset(frozen_encoder, dataset, mocker):
    """Test that the fraction setting samples the training pool."""
    spy = mocker.spy(protocol_module, "subset_fraction")
    _, report = run_protocol(
        frozen_encoder, dataset, _train_config(), LossWeights(), ProtocolConfig(setting="fraction", fraction=0.5, bg_classes=5), seed=2
    )
    spy.assert_called_once_with(dataset.train, 0.5, 2)
    assert report.cam_iou is None


def test_run_protocol_base_to_novel_trains_on_base_classes(frozen_encoder, dataset, mocker):
    """Test base-only training and the copied base/novel/HM metrics."""
    spy = mocker.spy(protocol_module, "few_shot")
    tuned = MetricsReport(base_accuracy=80.0, novel_accuracy=60.0, harmonic_mean=68.0)
    zero_shot = MetricsReport(base_accuracy=70.0, novel_accuracy=50.0, harmonic_mean=58.0)
    mocker.patch.object(protocol_module, "score_prompts", side_effect=[tuned, zero_shot])
    _, report = run_protocol(
        frozen_encoder, dataset, _train_config(), LossWeights.preset("base-to-novel"),
        ProtocolConfig(setting="base-to-novel", shots=2, bg_classes=5), seed=1,
    )
    base, _ = split_base_novel(dataset.spec.num_classes, dataset.spec.split_seed)
    assert spy.call_args.kwargs["classes"] == base
    assert (report.base_accuracy, report.novel_accuracy, report.harmonic_mean) == (80.0, 60.0, 68.0)
    assert report.zero_shot_accuracy == 58.0


def test_run_protocol_multi_object(frozen_encoder, multi_dataset):
    """Test the multi-object setting reports mAP."""
    _, report = run_protocol(
        frozen_encoder, multi_dataset, _train_config(), LossWeights(), ProtocolConfig(setting="multi-object", shots=2, bg_classes=5), seed=1
    )
    assert 0.0 <= report.mean_average_precision <= 100.0
    assert 0.0 <= report.zero_shot_accuracy <= 100.0
    assert report.accuracy is None


def test_cam_iou_on_test_is_a_fraction(frozen_encoder, dataset, prompts):
    """Test CAM IoU over strided test samples."""
    assert 0.0 <= cam_iou_on_test(frozen_encoder, prompts, dataset, 3) <= 1.0
