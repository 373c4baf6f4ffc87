"""
Unit tests for the command-line interface.
"""
import json
import logging
from unittest.mock import MagicMock, patch

import pytest

from prompt_decoupler.cli import config_overrides, main, parse_args
from prompt_decoupler.errors import ConfigError
from prompt_decoupler.trainer import MetricsReport


def test_no_command_prints_usage_hint(capsys):
    """Test running without a subcommand."""
    assert main([]) == 1
    assert "No command specified" in capsys.readouterr().out


def test_config_is_required():
    """Test that every subcommand needs --config."""
    with pytest.raises(SystemExit):
        parse_args(["train"])


def test_ablate_requires_plan():
    """Test the ablate-only --plan argument."""
    with pytest.raises(SystemExit):
        parse_args(["ablate", "--config", "run.ini"])
    args = parse_args(["ablate", "--config", "run.ini", "--plan", "erasing"])
    assert args.plan == "erasing"


def test_invalid_choice_is_rejected():
    """Test choices on mask and protocol flags."""
    with pytest.raises(SystemExit):
        parse_args(["train", "--config", "run.ini", "--mask-source", "perturbed"])


def test_config_overrides_maps_flags():
    """Test flag to "section.key" translation."""
    args = parse_args([
        "train", "--config", "run.ini", "--seed", "3", "--out", "/tmp/runs", "--mask-source", "oracle",
        "--mask-strategy", "blur", "--setting", "base-to-novel", "--shots", "4", "--erase-rate", "0.3",
        "--bg-classes", "10",
    ])
    assert config_overrides(args) == {
        "run.seeds": (3,),
        "run.output_dir": "/tmp/runs",
        "train.mask_source": "oracle",
        "train.mask_strategy": "blur",
        "train.erase_rate": 0.3,
        "protocol.setting": "base-to-novel",
        "protocol.shots": 4,
        "protocol.bg_classes": 10,
    }


def test_config_overrides_expands_weights_preset():
    """Test that a preset sets all four coefficients."""
    args = parse_args(["train", "--config", "run.ini", "--weights-preset", "base-to-novel"])
    assert config_overrides(args) == {"loss.cls": 1.0, "loss.v": 0.4, "loss.f": 0.4, "loss.b": 0.5}


def test_config_overrides_empty_without_flags():
    """Test that no flags means no overrides."""
    assert config_overrides(parse_args(["pretrain", "--config", "run.ini"])) == {}


@patch("prompt_decoupler.cli.ExperimentRunner")
@patch("prompt_decoupler.cli.load_config")
def test_train_command(mock_load_config, mock_runner):
    """Test the train command wiring."""
    mock_config = MagicMock()
    mock_load_config.return_value = mock_config

    result = main(["train", "--config", "run.ini", "--checkpoint", "b.ckpt", "--shots", "2"])

    assert result == 0
    mock_load_config.assert_called_once_with("run.ini", {"protocol.shots": 2})
    mock_runner.assert_called_once_with(mock_config)
    mock_runner.return_value.train.assert_called_once_with("b.ckpt")


@patch("prompt_decoupler.cli.ExperimentRunner")
@patch("prompt_decoupler.cli.load_config")
def test_eval_command_prints_summary(mock_load_config, mock_runner, capsys):
    """Test that eval prints the JSON summary."""
    mock_runner.return_value.evaluate.return_value = MetricsReport(accuracy=75.0)

    assert main(["eval", "--config", "run.ini", "--prompts", "p.ckpt"]) == 0

    mock_runner.return_value.evaluate.assert_called_once_with(None, "p.ckpt")
    printed = json.loads(capsys.readouterr().out)
    assert printed["accuracy"] == 75.0


@patch("prompt_decoupler.cli.ExperimentRunner")
@patch("prompt_decoupler.cli.load_config")
def test_ablate_and_visualize_commands(mock_load_config, mock_runner):
    """Test the ablate and visualize wiring."""
    assert main(["ablate", "--config", "run.ini", "--plan", "masking"]) == 0
    mock_runner.return_value.ablate.assert_called_once_with("masking", None)
    assert main(["visualize", "--config", "run.ini", "--samples", "3"]) == 0
    mock_runner.return_value.visualize.assert_called_once_with(3, None, None)


@patch("prompt_decoupler.cli.ExperimentRunner")
@patch("prompt_decoupler.cli.load_config")
def test_pretrain_command(mock_load_config, mock_runner):
    """Test the pretrain command wiring."""
    assert main(["pretrain", "--config", "run.ini"]) == 0
    mock_runner.return_value.pretrain.assert_called_once_with()


@patch("prompt_decoupler.cli.load_config")
def test_validation_errors_exit_with_one(mock_load_config, caplog):
    """Test that library errors are logged and mapped to exit code 1."""
    mock_load_config.side_effect = ConfigError("unknown key train.dropout")
    with caplog.at_level(logging.ERROR):
        assert main(["train", "--config", "run.ini"]) == 1
    assert "Validation error: unknown key train.dropout" in caplog.text


@patch("prompt_decoupler.cli.ExperimentRunner")
@patch("prompt_decoupler.cli.load_config")
def test_unexpected_errors_exit_with_one(mock_load_config, mock_runner, caplog):
    """Test that unexpected failures are logged with the command name."""
    mock_runner.return_value.pretrain.side_effect = RuntimeError("disk full")
    with caplog.at_level(logging.ERROR):
        assert main(["pretrain", "--config", "run.ini"]) == 1
    assert "Failed to run pretrain: disk full" in caplog.text
