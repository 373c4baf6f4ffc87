"""
Run configuration: INI sections mapped onto the component dataclasses.
"""
import configparser
import copy
import dataclasses
import logging
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Union

from prompt_decoupler.encoder.model import EncoderConfig
from prompt_decoupler.encoder.pretraining import PretrainConfig
from prompt_decoupler.errors import ConfigError, DecouplerError, ResolutionError
from prompt_decoupler.losses import LossWeights
from prompt_decoupler.scenedata.generator import DatasetSpec
from prompt_decoupler.scenedata.storage import write_atomic
from prompt_decoupler.trainer.prompt_tuner import TrainConfig
from prompt_decoupler.trainer.protocol import ProtocolConfig

logger = logging.getLogger(__name__)

WORKERS_ENV = "PROMPT_DECOUPLER_WORKERS"
DEFAULT_SEEDS = (1, 2, 3, 4, 5)


@dataclass
class RunSettings:
    """
    Attributes:
        output_dir: Root of the run directories (required)
        seeds: Seeds averaged by ablations; the first one drives single runs
        data_seed: Seed of the generated dataset
        workers: Parallel ablation runs; falls back to PROMPT_DECOUPLER_WORKERS, then 1
    """

    output_dir: str = ""
    seeds: Tuple[int, ...] = DEFAULT_SEEDS
    data_seed: int = 0
    workers: int = 0

    def resolved_workers(self) -> int:
        if self.workers > 0:
            return self.workers
        raw = os.environ.get(WORKERS_ENV)
        if raw:
            try:
                return max(1, int(raw))
            except ValueError as e:
                raise ConfigError(f"{WORKERS_ENV} must be an integer, got '{raw}'") from e
        return 1


SECTIONS = {
    "encoder": EncoderConfig,
    "data": DatasetSpec,
    "pretrain": PretrainConfig,
    "train": TrainConfig,
    "loss": LossWeights,
    "protocol": ProtocolConfig,
    "run": RunSettings,
}
REQUIRED_KEYS = (("run", "output_dir"),)


def _coerce(raw: str, annotation: Any, key: str) -> Any:
    origin = typing.get_origin(annotation)
    try:
        if annotation is bool:
            lowered = raw.strip().lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw}")
        if annotation is int:
            return int(raw)
        if annotation is float:
            return float(raw)
        if origin is tuple:
            args = [a for a in typing.get_args(annotation) if a is not Ellipsis]
            item_type = args[0] if args else str
            return tuple(item_type(part.strip()) for part in raw.split(",") if part.strip())
        return raw.strip()
    except ValueError as e:
        raise ConfigError(f"{key}: cannot read '{raw}' ({e})") from e


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(str(v) for v in value)
    return str(value)


@dataclass
class RunConfig:
    """
    Fully resolved configuration of one run, one dataclass per INI section.
    """

    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    data: DatasetSpec = field(default_factory=DatasetSpec)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    run: RunSettings = field(default_factory=RunSettings)

    @classmethod
    def from_text(cls, text: str, source: str = "<config>", overrides: Optional[Mapping[str, Any]] = None) -> "RunConfig":
        """
        Parse an INI document, then apply "section.key" overrides.

        Raises:
            ConfigError: On unknown sections or keys, unreadable values or a missing required key
        """
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read_string(text, source=source)
        except configparser.Error as e:
            raise ConfigError(f"{source}: {e}") from e
        config = cls()
        for section in parser.sections():
            if section not in SECTIONS:
                raise ConfigError(f"{source}: unknown section [{section}]")
            for key, raw in parser.items(section):
                config.set(f"{section}.{key}", raw)
        overrides = dict(overrides or {})
        for dotted, value in overrides.items():
            config.set(dotted, value)
        for section, key in REQUIRED_KEYS:
            if not parser.has_option(section, key) and f"{section}.{key}" not in overrides:
                raise ConfigError(f"{source}: missing required key {section}.{key}")
        config.validate()
        return config

    @classmethod
    def load(cls, path: Union[str, Path], overrides: Optional[Mapping[str, Any]] = None) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ResolutionError(f"config file not found: {path}")
        logger.info(f"Loading run configuration from {path}")
        return cls.from_text(path.read_text(encoding="utf-8"), source=str(path), overrides=overrides)

    def check_key(self, dotted: str) -> Tuple[str, dataclasses.Field]:
        """
        Resolve "section.key" to its dataclass field.

        Raises:
            ConfigError: If the section or key is unknown
        """
        section, _, key = dotted.partition(".")
        if section not in SECTIONS:
            raise ConfigError(f"unknown section in key {dotted}")
        known = {f.name: f for f in dataclasses.fields(SECTIONS[section])}
        if key not in known:
            raise ConfigError(f"unknown key {dotted}")
        return section, known[key]

    def set(self, dotted: str, value: Any) -> None:
        """Assign a value, coercing strings by the field's annotation."""
        section, fld = self.check_key(dotted)
        hints = typing.get_type_hints(SECTIONS[section])
        if isinstance(value, str):
            value = _coerce(value, hints[fld.name], dotted)
        setattr(getattr(self, section), fld.name, value)

    def with_overrides(self, overrides: Mapping[str, Any]) -> "RunConfig":
        """Deep copy with "section.key" overrides applied and validated."""
        updated = copy.deepcopy(self)
        for dotted, value in overrides.items():
            updated.set(dotted, value)
        updated.validate()
        return updated

    def validate(self) -> None:
        try:
            self.encoder.validate()
            self.data.validate()
            self.pretrain.validate()
            self.train.validate()
            self.loss.validate()
            self.protocol.validate()
        except ConfigError:
            raise
        except DecouplerError as e:
            raise ConfigError(str(e)) from e
        if self.data.image_size != self.encoder.image_size:
            raise ConfigError(f"data.image_size {self.data.image_size} differs from encoder.image_size {self.encoder.image_size}")
        if not self.run.seeds:
            raise ConfigError("run.seeds must list at least one seed")

    def to_text(self) -> str:
        """INI dump with sections and keys in declaration order."""
        lines = []
        for section, klass in SECTIONS.items():
            lines.append(f"[{section}]")
            values = getattr(self, section)
            for fld in dataclasses.fields(klass):
                lines.append(f"{fld.name} = {_format(getattr(values, fld.name))}")
            lines.append("")
        return "\n".join(lines)

    def dump(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        write_atomic(path, self.to_text().encode("utf-8"))
        return path

    @property
    def primary_seed(self) -> int:
        return self.run.seeds[0]


def load_config(path: Union[str, Path], overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    return RunConfig.load(path, overrides)
