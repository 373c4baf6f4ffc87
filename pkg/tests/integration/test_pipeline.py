"""
Integration tests running the full command pipeline on the tiny configuration.
"""
import json

from prompt_decoupler.cli import main


def _pipeline(config_file, out):
    base = ["--config", str(config_file), "--out", str(out)]
    assert main(["pretrain"] + base) == 0
    assert main(["train"] + base) == 0
    assert main(["eval"] + base) == 0
    assert main(["visualize"] + base + ["--samples", "2"]) == 0


def test_pipeline_artifacts(config_file, tmp_path, capsys):
    """Test pretrain, train, eval and visualize leave their artifacts."""
    out = tmp_path / "first"
    _pipeline(config_file, out)

    assert (out / "pretrain" / "backbone.ckpt").exists()
    assert (out / "pretrain" / "pretrain_metrics.csv").exists()
    train_dir = out / "train" / "seed-1"
    for name in ("prompts.ckpt", "epochs.csv", "summary.json", "config.ini"):
        assert (train_dir / name).exists()
    assert len((train_dir / "epochs.csv").read_text(encoding="utf-8").splitlines()) == 3

    summary = json.loads((out / "eval" / "seed-1" / "summary.json").read_text(encoding="utf-8"))
    assert 0.0 <= summary["accuracy"] <= 100.0
    assert 0.0 <= summary["zero_shot_accuracy"] <= 100.0
    train_summary = json.loads((train_dir / "summary.json").read_text(encoding="utf-8"))
    assert summary["backbone_fingerprint"] == train_summary["backbone_fingerprint"]

    assert len(list((out / "visualize" / "seed-1" / "heatmaps").glob("*.pgm"))) == 2
    assert len(list((out / "visualize" / "seed-1" / "overlays").glob("*.ppm"))) == 2


def test_pipeline_reruns_are_byte_identical(config_file, tmp_path):
    """Test that the same config and seed reproduce every checkpoint exactly."""
    first, second = tmp_path / "first", tmp_path / "second"
    _pipeline(config_file, first)
    _pipeline(config_file, second)

    for relative in ("pretrain/backbone.ckpt", "train/seed-1/prompts.ckpt", "train/seed-1/epochs.csv"):
        assert (first / relative).read_bytes() == (second / relative).read_bytes()
    for relative in ("visualize/seed-1/heatmaps", "visualize/seed-1/overlays"):
        left = sorted((first / relative).iterdir())
        right = sorted((second / relative).iterdir())
        assert [p.name for p in left] == [p.name for p in right]
        assert all(a.read_bytes() == b.read_bytes() for a, b in zip(left, right))


def test_train_before_pretrain_fails(config_file, tmp_path, caplog):
    """Test the exit code when the backbone checkpoint is missing."""
    assert main(["train", "--config", str(config_file), "--out", str(tmp_path / "empty")]) == 1
    assert "backbone checkpoint not found" in caplog.text


def test_erasing_ablation_reports_directions(config_file, tmp_path):
    """Test the erasing plan end to end, down to its direction checks."""
    out = tmp_path / "ablate"
    base = ["--config", str(config_file), "--out", str(out)]
    assert main(["pretrain"] + base) == 0
    assert main(["ablate"] + base + ["--plan", "erasing"]) == 0

    table = (out / "ablate" / "erasing" / "erasing.csv").read_text(encoding="utf-8").splitlines()
    assert [line.split(",")[0] for line in table[1:]] == ["erase=0.1", "erase=0.3", "erase=0.5", "erase=0.7"]
    directions = (out / "ablate" / "erasing" / "erasing_directions.csv").read_text(encoding="utf-8").splitlines()
    assert directions[0] == "check,holds,detail"
    assert [line.split(",")[0] for line in directions[1:]] == ["erase=0.5 stays close to erase=0.1", "erase=0.7 is the minimum"]
    assert all(line.split(",")[1] in ("true", "false") for line in directions[1:])
