"""
Unit tests for ablation plans, plan files and the ablation runner.
"""
from pathlib import Path
from unittest.mock import patch

import pytest

from prompt_decoupler.config import RunConfig
from prompt_decoupler.errors import PlanError
from prompt_decoupler.trainer import MetricsReport
from prompt_decoupler.trainer.ablation import (
    PLAN_BUILDERS,
    AblationPlan,
    AblationRunner,
    AblationTable,
    PlanRow,
    bg_classes_plan,
    build_plan,
    erasing_plan,
    load_plan,
    loss_items_plan,
    loss_weights_plan,
    parse_plan,
)
from tests.conftest import TINY_CONFIG_TEXT

PLANS_DIR = Path(__file__).resolve().parents[2] / "configs" / "plans"


@pytest.fixture
def run_config(tmp_path):
    """Tiny resolved run configuration."""
    return RunConfig.from_text(TINY_CONFIG_TEXT.format(output_dir=tmp_path / "runs"))


def test_loss_items_plan_covers_every_combination():
    """Test the eight on/off rows of the auxiliary terms."""
    plan = loss_items_plan()
    names = [row.name for row in plan.rows]
    assert names == ["cls", "cls+b", "cls+f", "cls+f+b", "cls+v", "cls+v+b", "cls+v+f", "cls+v+f+b"]
    assert plan.rows[0].overrides == {"loss.v": 0.0, "loss.f": 0.0, "loss.b": 0.0}
    assert plan.rows[-1].overrides == {"loss.v": 0.6, "loss.f": 0.4, "loss.b": 0.1}


def test_loss_weights_plan_sweeps_one_term_at_a_time():
    """Test the weight sweep rows."""
    plan = loss_weights_plan()
    assert len(plan.rows) == 18
    assert plan.rows[0] == PlanRow("v=0.1", {"loss.v": 0.1})
    assert all(len(row.overrides) == 1 for row in plan.rows)


def test_fixed_plans_share_their_settings():
    """Test shared overrides of the built-in plans."""
    assert erasing_plan().shared == {"train.mask_source": "oracle"}
    assert [row.name for row in erasing_plan().rows] == ["erase=0.1", "erase=0.3", "erase=0.5", "erase=0.7"]
    plan = bg_classes_plan()
    assert [row.overrides["protocol.bg_classes"] for row in plan.rows] == [5, 10, 15, 25]
    assert plan.shared["loss.v"] == 0.0 and plan.shared["loss.f"] == 0.0
    assert plan.shared["loss.b"] == 0.5


def test_build_plan_by_name():
    """Test the built-in plan registry."""
    for name in PLAN_BUILDERS:
        assert build_plan(name).name == name
    with pytest.raises(PlanError, match="unknown plan"):
        build_plan("dropout")


def test_plan_validate_errors(run_config):
    """Test empty plans, repeated rows, shared conflicts and unknown keys."""
    with pytest.raises(PlanError, match="no rows"):
        AblationPlan("empty", []).validate()
    with pytest.raises(PlanError, match="repeats row"):
        AblationPlan("twice", [PlanRow("a"), PlanRow("a")]).validate()
    with pytest.raises(PlanError, match="conflicting"):
        AblationPlan("clash", [PlanRow("a", {"train.erase_rate": 0.5})], shared={"train.erase_rate": 0.1}).validate()
    AblationPlan("same", [PlanRow("a", {"train.erase_rate": 0.1})], shared={"train.erase_rate": 0.1}).validate()
    with pytest.raises(PlanError, match="unknown key train.dropout"):
        AblationPlan("typo", [PlanRow("a", {"train.dropout": 0.1})]).validate(run_config)


def test_plan_resolve(run_config):
    """Test row resolution against the base configuration."""
    plan = AblationPlan("p", [PlanRow("a", {"loss.v": 0.2})], shared={"train.erase_rate": 0.3})
    resolved = plan.resolve(run_config, plan.rows[0])
    assert resolved.loss.v == 0.2
    assert resolved.train.erase_rate == 0.3
    assert run_config.loss.v == 0.6
    off = PlanRow("off", {"loss.cls": 0.0, "loss.v": 0.0, "loss.f": 0.0, "loss.b": 0.0})
    with pytest.raises(PlanError, match="switches every loss term off"):
        AblationPlan("p", [off]).resolve(run_config, off)
    bad = PlanRow("bad", {"train.erase_rate": 2.0})
    with pytest.raises(PlanError, match="row bad"):
        AblationPlan("p", [bad]).resolve(run_config, bad)


def test_parse_plan_sections():
    """Test plan INI parsing."""
    plan = parse_plan(
        "[plan]\nname = sweep\n\n[shared]\ntrain.mask_source = oracle\n\n"
        "[row low]\ntrain.erase_rate = 0.1\n\n[row high]\ntrain.erase_rate = 0.7\n"
    )
    assert plan.name == "sweep"
    assert plan.shared == {"train.mask_source": "oracle"}
    assert [row.name for row in plan.rows] == ["low", "high"]
    assert plan.rows[1].overrides == {"train.erase_rate": "0.7"}


def test_parse_plan_errors():
    """Test duplicates, unknown sections and shared conflicts in plan files."""
    with pytest.raises(PlanError):
        parse_plan("[row a]\ntrain.erase_rate = 0.1\n\n[row a]\ntrain.erase_rate = 0.2\n")
    with pytest.raises(PlanError):
        parse_plan("[row a]\ntrain.erase_rate = 0.1\ntrain.erase_rate = 0.2\n")
    with pytest.raises(PlanError, match="unknown section \\[rows\\]"):
        parse_plan("[rows]\ntrain.erase_rate = 0.1\n")
    with pytest.raises(PlanError, match="conflicting"):
        parse_plan("[shared]\ntrain.mask_source = oracle\n\n[row a]\ntrain.mask_source = gradcam\n")
    with pytest.raises(PlanError, match="no rows"):
        parse_plan("[plan]\nname = empty\n")


def test_load_plan_from_file(run_config):
    """Test the bundled plan file resolves against the run configuration."""
    plan = load_plan(PLANS_DIR / "oracle_erasing_blur.ini")
    assert plan.name == "oracle-erasing-blur"
    assert len(plan.rows) == 3
    plan.validate(run_config)
    resolved = plan.resolve(run_config, plan.rows[2])
    assert resolved.train.mask_strategy == "blur"
    assert resolved.train.erase_rate == 0.5


def test_ablation_table_csv():
    """Test the seed-averaged table layout, blank cells for missing metrics."""
    table = AblationTable(
        "p",
        (1, 2),
        [
            {"name": "a", "mean": {"accuracy": 50.0, "cam_iou": 0.5}, "std": {"accuracy": 1.0, "cam_iou": 0.0}},
            {"name": "b", "mean": {"accuracy": 40.0}, "std": {"accuracy": 0.0}},
        ],
    )
    assert table.metrics == ["accuracy", "cam_iou"]
    assert table.to_csv() == (
        "configuration,seeds,accuracy_mean,accuracy_std,cam_iou_mean,cam_iou_std\n"
        "a,2,50.0000,1.0000,0.5000,0.0000\n"
        "b,2,40.0000,0.0000,,\n"
    )


def test_ablation_table_write_csv(tmp_path):
    """Test that the table file is written with its parents."""
    table = AblationTable("p", (1,), [{"name": "a", "mean": {"accuracy": 10.0}, "std": {"accuracy": 0.0}}])
    path = table.write_csv(tmp_path / "ablations" / "p.csv")
    assert path.read_text(encoding="utf-8") == table.to_csv()


def _table(plan, means):
    rows = [{"name": name, "mean": mean, "std": {k: 0.0 for k in mean}} for name, mean in means]
    return AblationTable(plan, (1, 2), rows)


def test_loss_item_directions():
    """Test the term-beats-classification and novel-accuracy checks."""
    table = _table("loss-items", [
        ("cls", {"harmonic_mean": 60.0, "novel_accuracy": 55.0}),
        ("cls+v", {"harmonic_mean": 61.0, "novel_accuracy": 55.5}),
        ("cls+f", {"harmonic_mean": 59.0, "novel_accuracy": 54.0}),
        ("cls+v+f", {"harmonic_mean": 62.0, "novel_accuracy": 56.0}),
        ("cls+v+f+b", {"harmonic_mean": 63.0, "novel_accuracy": 57.0}),
    ])
    checks = {c.name: c for c in table.directions()}
    assert table.headline_metric == "harmonic_mean"
    assert list(checks) == ["cls+v beats cls", "cls+f beats cls", "cls+v+f+b beats cls", "adding b raises novel accuracy"]
    assert checks["cls+v beats cls"].holds
    assert not checks["cls+f beats cls"].holds
    assert checks["cls+f beats cls"].detail == "harmonic_mean 59.0000 vs 60.0000"
    assert checks["adding b raises novel accuracy"].holds


def test_loss_item_directions_without_novel_accuracy():
    """Test that the few-shot table skips the novel-accuracy check and uses accuracy."""
    table = _table("loss-items", [("cls", {"accuracy": 50.0}), ("cls+v+f+b", {"accuracy": 52.0})])
    checks = table.directions()
    assert [c.name for c in checks] == ["cls+v+f+b beats cls"]
    assert checks[0].holds


def test_erasing_directions():
    """Test the closeness of erase=0.5 and the minimum at erase=0.7."""
    table = _table("erasing", [
        ("erase=0.1", {"accuracy": 60.0}),
        ("erase=0.3", {"accuracy": 59.5}),
        ("erase=0.5", {"accuracy": 58.5}),
        ("erase=0.7", {"accuracy": 55.0}),
    ])
    assert [(c.name, c.holds) for c in table.directions()] == [
        ("erase=0.5 stays close to erase=0.1", True),
        ("erase=0.7 is the minimum", True),
    ]
    failing = _table("erasing", [
        ("erase=0.1", {"accuracy": 60.0}),
        ("erase=0.5", {"accuracy": 57.5}),
        ("erase=0.7", {"accuracy": 58.0}),
    ])
    assert [c.holds for c in failing.directions()] == [False, False]


def test_bg_class_directions_allow_small_drops():
    """Test the per-step tolerance on novel accuracy."""
    rising = _table("bg-classes", [
        ("bg=5", {"novel_accuracy": 50.0}),
        ("bg=10", {"novel_accuracy": 49.8}),
        ("bg=15", {"novel_accuracy": 51.0}),
    ])
    (check,) = rising.directions()
    assert check.holds
    falling = _table("bg-classes", [("bg=5", {"novel_accuracy": 50.0}), ("bg=10", {"novel_accuracy": 49.5})])
    (check,) = falling.directions()
    assert not check.holds
    assert check.detail.endswith("drops at bg=5 -> bg=10")


def test_directions_empty_for_other_plans_and_missing_rows(tmp_path):
    """Test that plans without rules or rows write no direction file."""
    assert _table("masking", [("hard", {"accuracy": 50.0})]).directions() == []
    table = _table("erasing", [("erase=0.1", {"accuracy": 50.0})])
    assert table.directions() == []
    assert table.write_directions(tmp_path / "d.csv") is None
    assert not (tmp_path / "d.csv").exists()


def test_write_directions_logs_and_writes(tmp_path, caplog):
    """Test the direction CSV and a warning for a failed check."""
    table = _table("bg-classes", [("bg=5", {"novel_accuracy": 50.0}), ("bg=10", {"novel_accuracy": 40.0})])
    path = table.write_directions(tmp_path / "bg_directions.csv")
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0] == "check,holds,detail"
    assert lines[1].startswith("novel accuracy non-decreasing in background classes,false,")
    assert "does not hold" in caplog.text


def _fake_protocol(encoder, dataset, train, loss, protocol, seed):
    return None, MetricsReport(accuracy=50.0 + seed + 10.0 * loss.v, epochs=[{"epoch": 1, "loss": 1.0}])


@patch("prompt_decoupler.trainer.ablation.run_protocol", side_effect=_fake_protocol)
def test_ablation_runner_averages_over_seeds(mock_run, run_config):
    """Test one run per (row, seed) and the mean/std aggregation."""
    plan = AblationPlan("weights", [PlanRow("v=0.2", {"loss.v": 0.2}), PlanRow("v=0.4", {"loss.v": 0.4})])
    table = AblationRunner(None, None, run_config, workers=2).run(plan)

    assert mock_run.call_count == 4
    assert sorted(call.args[5] for call in mock_run.call_args_list) == [1, 1, 2, 2]
    assert table.seeds == (1, 2)
    first, second = table.rows
    assert first["name"] == "v=0.2"
    assert first["mean"]["accuracy"] == pytest.approx(53.5)
    assert first["std"]["accuracy"] == pytest.approx(0.5)
    assert second["mean"]["accuracy"] == pytest.approx(55.5)
    assert first["mean"]["final_loss"] == 1.0
    assert table.metrics == ["accuracy", "final_loss"]


@patch("prompt_decoupler.trainer.ablation.run_protocol", side_effect=_fake_protocol)
def test_ablation_runner_rejects_bad_plans_before_running(mock_run, run_config):
    """Test that plan errors surface before any run starts."""
    plan = AblationPlan("typo", [PlanRow("a", {"loss.gamma": 1.0})])
    with pytest.raises(PlanError):
        AblationRunner(None, None, run_config, workers=1).run(plan)
    mock_run.assert_not_called()


@patch("prompt_decoupler.trainer.ablation.run_protocol", side_effect=_fake_protocol)
def test_ablation_runner_explicit_seeds(mock_run, run_config):
    """Test overriding the configured seeds."""
    table = AblationRunner(None, None, run_config, workers=1).run(AblationPlan("p", [PlanRow("a")]), seeds=[7])
    assert table.seeds == (7,)
    assert table.rows[0]["std"]["accuracy"] == 0.0
    mock_run.assert_called_once()


def test_cam_iou_checked_against_the_unprompted_baseline():
    """Test one baseline check per row that reports CAM IoU."""
    table = _table("masking", [("hard", {"accuracy": 50.0, "cam_iou": 0.5}), ("blur", {"accuracy": 51.0, "cam_iou": 0.3})])
    table.baseline = {"cam_iou": 0.4}
    assert [(c.name, c.holds) for c in table.directions()] == [
        ("hard CAM IoU beats the unprompted backbone", True),
        ("blur CAM IoU beats the unprompted backbone", False),
    ]
    assert table.directions()[1].detail == "cam_iou 0.3000 vs 0.4000"


def _fake_protocol_with_cam(encoder, dataset, train, loss, protocol, seed):
    return None, MetricsReport(accuracy=50.0, cam_iou=0.3 + 0.1 * seed, epochs=[{"epoch": 1, "loss": 1.0}])


@patch("prompt_decoupler.trainer.ablation.cam_iou_on_test", return_value=0.25)
@patch("prompt_decoupler.trainer.ablation.run_protocol", side_effect=_fake_protocol_with_cam)
def test_ablation_runner_scores_the_unprompted_baseline(mock_run, mock_cam, run_config):
    """Test that the runner scores the unprompted backbone once when CAM samples are configured."""
    config = run_config.with_overrides({"protocol.cam_samples": 4})
    table = AblationRunner(None, None, config, workers=1).run(AblationPlan("p", [PlanRow("a")]), seeds=[1, 2])

    mock_cam.assert_called_once()
    assert mock_cam.call_args.args[1] is None
    assert mock_cam.call_args.args[3] == 4
    assert table.baseline == {"cam_iou": 0.25}
    (check,) = table.directions()
    assert check.name == "a CAM IoU beats the unprompted backbone"
    assert check.holds
