"""
Unit tests for the evaluation metrics and the metrics report.
"""
import json

import numpy as np
import pytest

from prompt_decoupler.encoder import encode_texts
from prompt_decoupler.errors import ContractError, DomainError, ShapeError
from prompt_decoupler.scenedata import Tokenizer, render_foreground
from prompt_decoupler.trainer import (
    MetricsReport,
    accuracy,
    average_precision,
    cam_foreground_iou,
    harmonic_mean,
    mask_iou,
    mean_average_precision,
    per_class_accuracy,
)
from prompt_decoupler.trainer.metrics import rows_csv, write_rows_csv


@pytest.mark.parametrize(
    "base,novel,expected",
    [
        (82.69, 63.22, 71.66),
        (69.34, 74.22, 71.70),
        (50.0, 50.0, 50.0),
    ],
)
def test_harmonic_mean_anchors(base, novel, expected):
    """Test harmonic means of reported base/novel pairs."""
    assert round(harmonic_mean(base, novel), 2) == expected


def test_harmonic_mean_lies_between_inputs(rng):
    """Test min <= HM <= max."""
    for base, novel in rng.uniform(1.0, 100.0, size=(20, 2)):
        value = harmonic_mean(base, novel)
        assert min(base, novel) - 1e-9 <= value <= max(base, novel) + 1e-9


def test_harmonic_mean_errors():
    """Test the undefined and out-of-range cases."""
    with pytest.raises(DomainError):
        harmonic_mean(0.0, 0.0)
    with pytest.raises(ContractError):
        harmonic_mean(101.0, 50.0)
    assert harmonic_mean(0.0, 80.0) == 0.0


def test_accuracy_and_per_class_accuracy():
    """Test top-1 accuracy in percent."""
    assert accuracy([0, 1, 2, 2], [0, 1, 1, 2]) == 75.0
    assert per_class_accuracy([0, 1, 2, 2], [0, 1, 1, 2]) == {0: 100.0, 1: 50.0, 2: 100.0}
    with pytest.raises(ShapeError):
        accuracy([], [])
    with pytest.raises(ShapeError):
        accuracy([0, 1], [0])


def test_average_precision_hand_examples():
    """Test AP on hand-ranked lists."""
    assert average_precision([0.9, 0.8, 0.7], [False, True, False]) == pytest.approx(50.0)
    assert average_precision([0.9, 0.8, 0.7], [True, False, True]) == pytest.approx(100.0 * (1.0 + 2.0 / 3.0) / 2.0)
    assert average_precision([0.1, 0.5, 0.9], [False, False, True]) == pytest.approx(100.0)
    with pytest.raises(ContractError):
        average_precision([0.1, 0.2], [False, False])


def test_average_precision_breaks_ties_in_index_order():
    """Test stable ranking of equal scores."""
    assert average_precision([0.5, 0.5], [False, True]) == pytest.approx(50.0)
    assert average_precision([0.5, 0.5], [True, False]) == pytest.approx(100.0)


def test_mean_average_precision_matches_sklearn(rng):
    """Test mAP against scikit-learn on untied scores."""
    metrics = pytest.importorskip("sklearn.metrics")
    scores = rng.normal(size=(30, 4))
    label_sets = [tuple(np.flatnonzero(rng.random(4) < 0.4)) for _ in range(30)]
    label_sets[0] = (0, 1, 2, 3)
    targets = np.zeros((30, 4), dtype=int)
    for row, labels in enumerate(label_sets):
        targets[row, list(labels)] = 1
    expected = 100.0 * np.mean([metrics.average_precision_score(targets[:, c], scores[:, c]) for c in range(4)])
    assert mean_average_precision(scores, label_sets) == pytest.approx(expected, abs=1e-9)


def _loop_average_precision(scores, positives):
    order = sorted(range(len(scores)), key=lambda i: -scores[i])
    hits, total = 0, 0.0
    for rank, index in enumerate(order, start=1):
        if positives[index]:
            hits += 1
            total += hits / rank
    return 100.0 * total / hits


def test_mean_average_precision_matches_ranking_loop(rng):
    """Test mAP on random instances against a loop over each ranked list."""
    for _ in range(100):
        n, k = int(rng.integers(3, 12)), int(rng.integers(1, 5))
        scores = rng.normal(size=(n, k))
        label_sets = [tuple(np.flatnonzero(rng.random(k) < 0.5)) for _ in range(n)]
        label_sets[0] = tuple(range(k))
        expected = np.mean([
            _loop_average_precision(scores[:, c], [c in labels for labels in label_sets]) for c in range(k)
        ])
        assert mean_average_precision(scores, label_sets) == pytest.approx(expected, rel=0, abs=1e-9)


def test_mean_average_precision_skips_classes_without_positives():
    """Test that empty classes are left out."""
    scores = np.array([[0.9, 0.1], [0.2, 0.8]])
    assert mean_average_precision(scores, [(0,), (0,)]) == pytest.approx(100.0)
    with pytest.raises(ContractError):
        mean_average_precision(scores, [(), ()])
    with pytest.raises(ShapeError):
        mean_average_precision(scores, [(0,)])
    with pytest.raises(ContractError):
        mean_average_precision(np.array([[np.nan, 0.0], [0.0, 0.0]]), [(0,), (1,)])


def test_mask_iou():
    """Test IoU of binary masks."""
    a = np.zeros((4, 4))
    b = np.zeros((4, 4))
    a[:2, :] = 1
    b[1:3, :] = 1
    assert mask_iou(a, b) == pytest.approx(4.0 / 12.0)
    assert mask_iou(a, a) == 1.0
    assert mask_iou(np.zeros((2, 2)), np.zeros((2, 2))) == 1.0
    with pytest.raises(ShapeError):
        mask_iou(a, np.zeros((2, 2)))


def test_cam_foreground_iou_is_a_fraction(frozen_encoder, dataset):
    """Test the CAM IoU on the tiny backbone."""
    names = dataset.spec.class_names
    tokens = Tokenizer(frozen_encoder.config.context_length).encode_batch([render_foreground(n) for n in names])
    features = encode_texts(frozen_encoder, tokens)
    value = cam_foreground_iou(frozen_encoder, None, dataset.test[:4], features, batch_size=3)
    assert 0.0 <= value <= 1.0
    with pytest.raises(ContractError):
        cam_foreground_iou(frozen_encoder, None, [], features)


def test_metrics_report_summary_and_validation():
    """Test the summary payload and range checks."""
    report = MetricsReport(accuracy=80.0, per_class_accuracy={1: 60.0, 0: 100.0})
    report.epochs = [{"epoch": 1, "loss": 2.0}, {"epoch": 2, "loss": 1.5}]
    summary = report.summary({"seed": 3})
    assert summary["accuracy"] == 80.0
    assert summary["per_class_accuracy"] == {"0": 100.0, "1": 60.0}
    assert summary["initial_loss"] == 2.0
    assert summary["final_loss"] == 1.5
    assert summary["seed"] == 3
    assert "harmonic_mean" not in summary
    assert "epochs" not in summary
    report.validate()
    with pytest.raises(ContractError):
        MetricsReport(harmonic_mean=120.0).validate()


def test_metrics_report_files(tmp_path):
    """Test the epoch CSV and summary JSON writers."""
    report = MetricsReport(accuracy=50.0, epochs=[{"epoch": 1, "loss": 0.5, "lr": 0.01}])
    csv_path = report.write_epochs_csv(tmp_path / "epochs.csv")
    assert csv_path.read_text(encoding="utf-8") == "epoch,loss,lr\n1,0.5,0.01\n"
    json_path = report.write_summary_json(tmp_path / "run" / "summary.json", {"command": "train"})
    loaded = json.loads(json_path.read_text(encoding="utf-8"))
    assert loaded["command"] == "train"
    assert list(loaded) == sorted(loaded)


def test_rows_csv_empty_and_written(tmp_path):
    """Test CSV helpers."""
    assert rows_csv([]) == ""
    path = write_rows_csv(tmp_path / "rows.csv", [{"a": 1, "b": 2}])
    assert path.read_text(encoding="utf-8") == "a,b\n1,2\n"
