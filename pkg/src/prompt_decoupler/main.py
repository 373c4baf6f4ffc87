"""
Experiment orchestration for prompt_decoupler.

This module binds a resolved run configuration to pretraining, prompt tuning,
evaluation, ablation and CAM visualization, and lays their artifacts out under
the configured output directory.
"""
import logging
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np

from prompt_decoupler.config import RunConfig
from prompt_decoupler.disentangle import GradCamMasker, write_heatmap, write_overlay
from prompt_decoupler.encoder import DualEncoder, PromptSet, encode_texts, load_backbone, load_prompts, pretrain_contrastive, save_backbone, save_prompts
from prompt_decoupler.errors import ContractError, ResolutionError
from prompt_decoupler.scenedata import SceneDataset, Tokenizer, generate, render_foreground
from prompt_decoupler.trainer import (
    AblationRunner,
    MetricsReport,
    build_plan,
    cam_iou_on_test,
    headline,
    load_plan,
    run_protocol,
    score_prompts,
)
from prompt_decoupler.trainer.metrics import write_rows_csv

BACKBONE_FILE = "backbone.ckpt"
PROMPTS_FILE = "prompts.ckpt"
CONFIG_ECHO = "config.ini"


class ExperimentRunner:
    """
    Runs the pipeline commands for one configuration.

    Artifact layout under run.output_dir:
    - pretrain/: backbone.ckpt, pretrain_metrics.csv
    - train/seed-N/: prompts.ckpt, epochs.csv, summary.json
    - eval/seed-N/: summary.json
    - ablate/PLAN/: PLAN.csv
    - visualize/seed-N/: heatmaps/*.pgm, overlays/*.ppm

    Every run directory also holds config.ini, the resolved configuration.
    """

    def __init__(self, config: RunConfig):
        """
        Initialize the runner.

        Args:
            config: Validated run configuration
        """
        self.config = config
        self.output_dir = Path(config.run.output_dir)
        self.logger = logging.getLogger(__name__)
        self._dataset: Optional[SceneDataset] = None

    @property
    def dataset(self) -> SceneDataset:
        if self._dataset is None:
            self.logger.info(f"Generating dataset with data seed {self.config.run.data_seed}")
            self._dataset = generate(self.config.data, self.config.run.data_seed)
        return self._dataset

    @property
    def seed(self) -> int:
        return self.config.primary_seed

    def run_dir(self, *parts: str) -> Path:
        path = self.output_dir.joinpath(*parts)
        path.mkdir(parents=True, exist_ok=True)
        self.config.dump(path / CONFIG_ECHO)
        return path

    def default_backbone(self) -> Path:
        return self.output_dir / "pretrain" / BACKBONE_FILE

    def default_prompts(self) -> Path:
        return self.output_dir / "train" / f"seed-{self.seed}" / PROMPTS_FILE

    @staticmethod
    def _require(path: Union[str, Path], what: str) -> Path:
        path = Path(path)
        if not path.exists():
            raise ResolutionError(f"{what} not found, expected {path}")
        return path

    def load_backbone(self, checkpoint: Optional[Union[str, Path]] = None) -> DualEncoder:
        path = self._require(checkpoint or self.default_backbone(), "backbone checkpoint")
        return load_backbone(path, expected=self.config.encoder)

    def load_prompts(self, prompts: Optional[Union[str, Path]] = None) -> PromptSet:
        path = self._require(prompts or self.default_prompts(), "prompt checkpoint")
        return load_prompts(path, expected=self.config.encoder)

    def pretrain(self) -> Dict[str, Path]:
        """
        Contrastively pretrain and freeze the backbone.

        Returns:
            Paths of the backbone checkpoint and the pretraining metrics CSV
        """
        run_dir = self.run_dir("pretrain")
        self.logger.info(f"Pretraining backbone with seed {self.seed} into {run_dir}")
        encoder, history = pretrain_contrastive(
            self.config.encoder, self.config.data, self.config.pretrain, self.seed, held_out=self.dataset.test
        )
        extra = {"seed": self.seed}
        if history and "zero_shot_accuracy" in history[-1]:
            extra["zero_shot_accuracy"] = history[-1]["zero_shot_accuracy"]
        checkpoint = save_backbone(run_dir / BACKBONE_FILE, encoder, extra)
        metrics = write_rows_csv(run_dir / "pretrain_metrics.csv", history)
        self.logger.info(f"Wrote backbone checkpoint {checkpoint}")
        return {"checkpoint": checkpoint, "metrics": metrics}

    def train(self, checkpoint: Optional[Union[str, Path]] = None) -> Dict[str, Path]:
        """
        Tune prompts on the frozen backbone under the configured protocol.

        Args:
            checkpoint: Backbone checkpoint; the pretrain run's by default

        Returns:
            Paths of the prompt checkpoint, the per-epoch CSV and the JSON summary

        Raises:
            ResolutionError: If the backbone checkpoint is missing
            ConfigError: If the checkpoint does not match the encoder configuration
        """
        encoder = self.load_backbone(checkpoint)
        cfg = self.config
        run_dir = self.run_dir("train", f"seed-{self.seed}")
        self.logger.info(f"Tuning prompts ({cfg.protocol.setting}) with seed {self.seed} into {run_dir}")
        prompts, report = run_protocol(encoder, self.dataset, cfg.train, cfg.loss, cfg.protocol, self.seed)
        extra = self._summary_extra(encoder, "train")
        return {
            "prompts": save_prompts(run_dir / PROMPTS_FILE, prompts, cfg.encoder, {"seed": self.seed}),
            "epochs": report.write_epochs_csv(run_dir / "epochs.csv"),
            "summary": report.write_summary_json(run_dir / "summary.json", extra),
        }

    def evaluate(self, checkpoint: Optional[Union[str, Path]] = None, prompts: Optional[Union[str, Path]] = None) -> MetricsReport:
        """
        Score saved prompts on the test split and write the summary.

        Raises:
            ResolutionError: If the backbone or prompt checkpoint is missing
        """
        encoder = self.load_backbone(checkpoint)
        prompt_set = self.load_prompts(prompts)
        cfg = self.config
        run_dir = self.run_dir("eval", f"seed-{self.seed}")
        report = score_prompts(encoder, prompt_set, self.dataset, cfg.protocol.setting)
        report.zero_shot_accuracy = headline(score_prompts(encoder, None, self.dataset, cfg.protocol.setting))
        if cfg.protocol.cam_samples:
            report.cam_iou = cam_iou_on_test(encoder, prompt_set, self.dataset, cfg.protocol.cam_samples, cfg.train.beta, cfg.train.upsample)
        report.validate()
        report.write_summary_json(run_dir / "summary.json", self._summary_extra(encoder, "eval"))
        return report

    def ablate(self, plan: str, checkpoint: Optional[Union[str, Path]] = None) -> Path:
        """
        Run an ablation plan over every configured seed.

        Args:
            plan: Name of a built-in plan or path to a plan file

        Returns:
            Path of the ablation table CSV; the plan's direction checks, if any,
            are written next to it
        """
        ablation = load_plan(self._require(plan, "plan file")) if plan.endswith(".ini") else build_plan(plan)
        encoder = self.load_backbone(checkpoint)
        run_dir = self.run_dir("ablate", ablation.name)
        table = AblationRunner(encoder, self.dataset, self.config).run(ablation)
        path = table.write_csv(run_dir / f"{ablation.name}.csv")
        table.write_directions(run_dir / f"{ablation.name}_directions.csv")
        return path

    def visualize(self, samples: int = 5, checkpoint: Optional[Union[str, Path]] = None,
                  prompts: Optional[Union[str, Path]] = None) -> Dict[str, list]:
        """
        Write CAM heatmaps and thresholded-mask overlays for test samples.

        Prompts are used when given or when the train run left a checkpoint;
        otherwise the unprompted backbone is visualized.

        Returns:
            Lists of heatmap and overlay paths, one each per sample
        """
        if samples < 1:
            raise ContractError(f"visualize needs at least one sample, got {samples}")
        encoder = self.load_backbone(checkpoint)
        prompt_set = None
        if prompts or self.default_prompts().exists():
            prompt_set = self.load_prompts(prompts)
        else:
            self.logger.info("No prompt checkpoint found, visualizing the unprompted backbone")
        cfg = self.config
        run_dir = self.run_dir("visualize", f"seed-{self.seed}")
        chosen = self.dataset.test[:: max(1, len(self.dataset.test) // samples)][:samples]
        tokenizer = Tokenizer(cfg.encoder.context_length)
        names = cfg.data.class_names
        class_features = encode_texts(encoder, tokenizer.encode_batch([render_foreground(n) for n in names]), prompt_set)
        cams = GradCamMasker(encoder, cfg.train.beta, cfg.train.upsample).cams(
            np.stack([s.image for s in chosen]), class_features, [s.labels for s in chosen], prompt_set
        )
        written = {"heatmaps": [], "overlays": []}
        for sample, cam in zip(chosen, cams):
            stem = f"sample-{sample.sample_id:05d}"
            written["heatmaps"].append(write_heatmap(run_dir / "heatmaps" / f"{stem}.pgm", cam.pixel))
            written["overlays"].append(write_overlay(run_dir / "overlays" / f"{stem}.ppm", sample.image, cam.threshold(cfg.train.beta).values))
        self.logger.info(f"Wrote {len(chosen)} heatmaps and overlays under {run_dir}")
        return written

    def _summary_extra(self, encoder: DualEncoder, command: str) -> Dict:
        return {
            "command": command,
            "seed": self.seed,
            "setting": self.config.protocol.setting,
            "backbone_fingerprint": encoder.fingerprint(),
        }
