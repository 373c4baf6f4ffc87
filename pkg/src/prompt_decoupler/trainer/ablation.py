"""
Ablation plans and the worker pool that runs them.

A plan is a list of named rows, each a set of "section.key" overrides applied
to a base run configuration. Every row is trained once per seed and the table
reports the seed mean and standard deviation of each metric.
"""
import configparser
import csv
import io
import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from prompt_decoupler.errors import ConfigError, DecouplerError, PlanError
from prompt_decoupler.losses import LossWeights
from prompt_decoupler.scenedata.storage import write_atomic
from prompt_decoupler.trainer.metrics import MetricsReport
from prompt_decoupler.trainer.protocol import cam_iou_on_test, run_protocol

logger = logging.getLogger(__name__)

METRIC_COLUMNS = (
    "accuracy",
    "base_accuracy",
    "novel_accuracy",
    "harmonic_mean",
    "mean_average_precision",
    "cam_iou",
    "pseudo_label_accuracy",
    "final_loss",
)
LOSS_KEYS = ("loss.cls", "loss.v", "loss.f", "loss.b")
HEADLINE_METRICS = ("harmonic_mean", "mean_average_precision", "accuracy")
ERASE_TOLERANCE = 2.0
BG_STEP_TOLERANCE = 0.3


@dataclass
class PlanRow:
    name: str
    overrides: Dict[str, Any] = field(default_factory=dict)


@dataclass
class AblationPlan:
    """
    Named rows of configuration deltas.

    Attributes:
        name: Plan name, used for the output file
        rows: One configuration per row
        shared: Overrides applied to every row before the row's own
    """

    name: str
    rows: List[PlanRow]
    shared: Dict[str, Any] = field(default_factory=dict)

    def validate(self, run_config=None) -> None:
        """
        Raises:
            PlanError: On an empty plan, duplicate row names, a row overriding a
                shared key with another value, or keys the run config does not know
        """
        if not self.rows:
            raise PlanError(f"plan {self.name} has no rows")
        seen = set()
        for row in self.rows:
            if row.name in seen:
                raise PlanError(f"plan {self.name} repeats row {row.name}")
            seen.add(row.name)
            for key, value in row.overrides.items():
                if key in self.shared and str(self.shared[key]) != str(value):
                    raise PlanError(f"row {row.name} sets {key} = {value}, conflicting with shared {key} = {self.shared[key]}")
        if run_config is not None:
            for key in itertools.chain(self.shared, *(row.overrides for row in self.rows)):
                try:
                    run_config.check_key(key)
                except ConfigError as e:
                    raise PlanError(f"plan {self.name}: {e}") from e

    def resolve(self, run_config, row: PlanRow):
        """
        The run configuration of one row.

        Raises:
            PlanError: If the merged overrides are invalid or switch every loss term off
        """
        overrides = {**self.shared, **row.overrides}
        try:
            resolved = run_config.with_overrides(overrides)
        except DecouplerError as e:
            raise PlanError(f"row {row.name}: {e}") from e
        weights = resolved.loss
        if not any((weights.cls, weights.v, weights.f, weights.b)):
            raise PlanError(f"row {row.name} switches every loss term off")
        return resolved


def _label(v: bool, f: bool, b: bool) -> str:
    return "+".join(["cls"] + [name for name, on in (("v", v), ("f", f), ("b", b)) if on])


def loss_items_plan() -> AblationPlan:
    """All eight on/off combinations of the visual, foreground and background terms."""
    defaults = LossWeights()
    rows = []
    for v, f, b in itertools.product((False, True), repeat=3):
        rows.append(PlanRow(_label(v, f, b), {
            "loss.v": defaults.v if v else 0.0,
            "loss.f": defaults.f if f else 0.0,
            "loss.b": defaults.b if b else 0.0,
        }))
    return AblationPlan("loss-items", rows)


def loss_weights_plan(values: Sequence[float] = (0.1, 0.2, 0.4, 0.6, 0.8, 1.0)) -> AblationPlan:
    """One weight swept at a time, the others at their defaults."""
    rows = [PlanRow(f"{term}={value:g}", {f"loss.{term}": value}) for term in ("v", "f", "b") for value in values]
    return AblationPlan("loss-weights", rows)


def triplet_terms_plan() -> AblationPlan:
    modes = ("foreground-positive", "background-negative", "full")
    return AblationPlan("triplet-terms", [PlanRow(mode, {"loss.triplet_mode": mode}) for mode in modes])


def erasing_plan(rates: Sequence[float] = (0.1, 0.3, 0.5, 0.7)) -> AblationPlan:
    rows = [PlanRow(f"erase={rate:g}", {"train.erase_rate": rate}) for rate in rates]
    return AblationPlan("erasing", rows, shared={"train.mask_source": "oracle"})


def masking_plan() -> AblationPlan:
    rows = [PlanRow(strategy, {"train.mask_strategy": strategy}) for strategy in ("hard", "blur")]
    return AblationPlan("masking", rows, shared={"train.mask_source": "oracle"})


def bg_classes_plan(counts: Sequence[int] = (5, 10, 15, 25)) -> AblationPlan:
    """Background-space size with the background-text term as the only auxiliary loss."""
    rows = [PlanRow(f"bg={count}", {"protocol.bg_classes": count}) for count in counts]
    shared = {"protocol.setting": "base-to-novel", "loss.v": 0.0, "loss.f": 0.0, "loss.b": LossWeights.preset("base-to-novel").b}
    return AblationPlan("bg-classes", rows, shared=shared)


def mask_source_plan() -> AblationPlan:
    return AblationPlan("mask-source", [PlanRow(source, {"train.mask_source": source}) for source in ("gradcam", "oracle")])


def shots_plan(shots: Sequence[int] = (1, 2, 4, 16)) -> AblationPlan:
    rows = [PlanRow(f"shots={n}", {"protocol.shots": n}) for n in shots]
    return AblationPlan("shots", rows, shared={"protocol.setting": "fewshot"})


def fraction_plan(fractions: Sequence[float] = (0.05, 0.1, 0.2, 0.3, 0.5, 1.0)) -> AblationPlan:
    rows = [PlanRow(f"fraction={value:g}", {"protocol.fraction": value}) for value in fractions]
    return AblationPlan("fraction", rows, shared={"protocol.setting": "fraction"})


PLAN_BUILDERS = {
    "loss-items": loss_items_plan,
    "loss-weights": loss_weights_plan,
    "triplet-terms": triplet_terms_plan,
    "erasing": erasing_plan,
    "masking": masking_plan,
    "bg-classes": bg_classes_plan,
    "mask-source": mask_source_plan,
    "shots": shots_plan,
    "fraction": fraction_plan,
}


def build_plan(name: str) -> AblationPlan:
    if name not in PLAN_BUILDERS:
        raise PlanError(f"unknown plan '{name}', expected one of {sorted(PLAN_BUILDERS)}")
    return PLAN_BUILDERS[name]()


def parse_plan(text: str, source: str = "<plan>") -> AblationPlan:
    """
    Read a plan from INI text.

    The optional [plan] section holds `name`; [shared] holds overrides for every
    row; each [row NAME] section is one row. Keys are "section.key".

    Raises:
        PlanError: On duplicate sections or keys, unknown sections, or no rows
    """
    parser = configparser.ConfigParser(interpolation=None, strict=True)
    try:
        parser.read_string(text, source=source)
    except configparser.Error as e:
        raise PlanError(f"{source}: {e}") from e
    name = parser.get("plan", "name", fallback=Path(source).stem)
    shared: Dict[str, Any] = {}
    rows: List[PlanRow] = []
    for section in parser.sections():
        if section == "plan":
            continue
        if section == "shared":
            shared = dict(parser.items(section))
        elif section.startswith("row "):
            rows.append(PlanRow(section[4:].strip(), dict(parser.items(section))))
        else:
            raise PlanError(f"{source}: unknown section [{section}]")
    plan = AblationPlan(name, rows, shared)
    plan.validate()
    return plan


def load_plan(path: Union[str, Path]) -> AblationPlan:
    path = Path(path)
    return parse_plan(path.read_text(encoding="utf-8"), source=str(path))


def _metrics(report: MetricsReport) -> Dict[str, float]:
    values = {name: getattr(report, name) for name in METRIC_COLUMNS if name != "final_loss"}
    if report.epochs:
        values["final_loss"] = report.epochs[-1]["loss"]
    return {k: float(v) for k, v in values.items() if v is not None}


@dataclass
class AblationTable:
    """
    Seed-averaged metrics, one row per plan configuration.

    `baseline` holds metrics of the unprompted backbone, currently only `cam_iou`.
    """

    plan: str
    seeds: Tuple[int, ...]
    rows: List[Dict[str, Any]]
    baseline: Dict[str, float] = field(default_factory=dict)

    @property
    def metrics(self) -> List[str]:
        present = {key for row in self.rows for key in row["mean"]}
        return [name for name in METRIC_COLUMNS if name in present]

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        metrics = self.metrics
        writer.writerow(["configuration", "seeds"] + [f"{m}_{stat}" for m in metrics for stat in ("mean", "std")])
        for row in self.rows:
            cells = [row["name"], len(self.seeds)]
            for m in metrics:
                if m in row["mean"]:
                    cells.extend([f"{row['mean'][m]:.4f}", f"{row['std'][m]:.4f}"])
                else:
                    cells.extend(["", ""])
            writer.writerow(cells)
        return buffer.getvalue()

    def write_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        write_atomic(path, self.to_csv().encode("utf-8"))
        logger.info(f"Wrote ablation table {path}")
        return path

    def mean(self, row_name: str, metric: str) -> Optional[float]:
        for row in self.rows:
            if row["name"] == row_name:
                return row["mean"].get(metric)
        return None

    @property
    def headline_metric(self) -> Optional[str]:
        """First of HM, mAP and accuracy that every row reports."""
        for name in HEADLINE_METRICS:
            if self.rows and all(name in row["mean"] for row in self.rows):
                return name
        return None

    def directions(self) -> List["DirectionCheck"]:
        """Expected orderings between rows for the plans that have them, then the baseline checks."""
        rule = DIRECTION_RULES.get(self.plan)
        return (rule(self) if rule else []) + baseline_directions(self)

    def write_directions(self, path: Union[str, Path]) -> Optional[Path]:
        """
        Log every direction check and write them as CSV.

        Returns:
            The written path, or None when the plan has no applicable checks
        """
        checks = self.directions()
        if not checks:
            return None
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["check", "holds", "detail"])
        for check in checks:
            writer.writerow([check.name, str(check.holds).lower(), check.detail])
            if check.holds:
                logger.info(f"Plan {self.plan}: {check.name} holds ({check.detail})")
            else:
                logger.warning(f"Plan {self.plan}: {check.name} does not hold ({check.detail})")
        path = Path(path)
        write_atomic(path, buffer.getvalue().encode("utf-8"))
        return path


class DirectionCheck(NamedTuple):
    name: str
    holds: bool
    detail: str


def _beats(table: AblationTable, better: str, worse: str, metric: str, name: str) -> Optional[DirectionCheck]:
    high, low = table.mean(better, metric), table.mean(worse, metric)
    if high is None or low is None:
        return None
    return DirectionCheck(name, high > low, f"{metric} {high:.4f} vs {low:.4f}")


def loss_item_directions(table: AblationTable) -> List[DirectionCheck]:
    """Each auxiliary term and the full objective beat classification alone; L_b raises novel accuracy."""
    checks = []
    metric = table.headline_metric
    if metric is not None:
        for name in ("cls+v", "cls+f", "cls+v+f+b"):
            checks.append(_beats(table, name, "cls", metric, f"{name} beats cls"))
    checks.append(_beats(table, "cls+v+f+b", "cls+v+f", "novel_accuracy", "adding b raises novel accuracy"))
    return [c for c in checks if c is not None]


def erasing_directions(table: AblationTable) -> List[DirectionCheck]:
    """Moderate erasing costs little; the heaviest erasing rate scores lowest."""
    metric = table.headline_metric
    if metric is None:
        return []
    checks = []
    light, half = table.mean("erase=0.1", metric), table.mean("erase=0.5", metric)
    if light is not None and half is not None:
        checks.append(DirectionCheck(
            "erase=0.5 stays close to erase=0.1",
            abs(light - half) <= ERASE_TOLERANCE,
            f"{metric} {half:.4f} vs {light:.4f}, tolerance {ERASE_TOLERANCE:g}",
        ))
    heavy = table.mean("erase=0.7", metric)
    erased = [row["mean"][metric] for row in table.rows if row["name"].startswith("erase=")]
    if heavy is not None and len(erased) > 1:
        checks.append(DirectionCheck("erase=0.7 is the minimum", heavy <= min(erased), f"{metric} {heavy:.4f}, minimum {min(erased):.4f}"))
    return checks


def bg_class_directions(table: AblationTable) -> List[DirectionCheck]:
    """Novel accuracy does not fall as the background space grows, up to a per-step tolerance."""
    values = [(row["name"], row["mean"]["novel_accuracy"]) for row in table.rows if "novel_accuracy" in row["mean"]]
    if len(values) < 2:
        return []
    drops = [(a, b) for (a, x), (b, y) in zip(values, values[1:]) if y < x - BG_STEP_TOLERANCE]
    detail = ", ".join(f"{name} {value:.4f}" for name, value in values)
    if drops:
        detail += "; drops at " + ", ".join(f"{a} -> {b}" for a, b in drops)
    return [DirectionCheck("novel accuracy non-decreasing in background classes", not drops, detail)]


def baseline_directions(table: AblationTable) -> List[DirectionCheck]:
    """Every row's CAM IoU beats the unprompted backbone's."""
    base = table.baseline.get("cam_iou")
    if base is None:
        return []
    return [
        DirectionCheck(f"{row['name']} CAM IoU beats the unprompted backbone", row["mean"]["cam_iou"] > base,
                       f"cam_iou {row['mean']['cam_iou']:.4f} vs {base:.4f}")
        for row in table.rows if "cam_iou" in row["mean"]
    ]


DIRECTION_RULES: Dict[str, Callable[[AblationTable], List[DirectionCheck]]] = {
    "loss-items": loss_item_directions,
    "erasing": erasing_directions,
    "bg-classes": bg_class_directions,
}


class AblationRunner:
    """
    Runs every (row, seed) pair of a plan on a thread pool.

    Runs share only the frozen backbone and the dataset, both read-only.

    Args:
        encoder: Frozen backbone
        dataset: Generated dataset
        run_config: Base configuration every row is applied to
        workers: Thread count; the run config's resolved worker count by default
    """

    def __init__(self, encoder, dataset, run_config, workers: Optional[int] = None):
        self.encoder = encoder
        self.dataset = dataset
        self.run_config = run_config
        self.workers = workers or run_config.run.resolved_workers()
        self.logger = logging.getLogger(__name__)

    def _run_one(self, plan: AblationPlan, row: PlanRow, config, seed: int) -> Dict[str, float]:
        self.logger.info(f"Plan {plan.name}: row {row.name}, seed {seed}")
        _, report = run_protocol(self.encoder, self.dataset, config.train, config.loss, config.protocol, seed)
        return _metrics(report)

    def run(self, plan: AblationPlan, seeds: Optional[Sequence[int]] = None) -> AblationTable:
        """
        Raises:
            PlanError: If the plan is malformed or a row's configuration is invalid
        """
        seeds = tuple(seeds or self.run_config.run.seeds)
        plan.validate(self.run_config)
        configs = [plan.resolve(self.run_config, row) for row in plan.rows]
        jobs = [(r, s) for r in range(len(plan.rows)) for s in seeds]
        self.logger.info(f"Running plan {plan.name}: {len(plan.rows)} rows x {len(seeds)} seeds on {self.workers} workers")
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            futures = [pool.submit(self._run_one, plan, plan.rows[r], configs[r], s) for r, s in jobs]
            results = [f.result() for f in futures]

        rows = []
        for r, row in enumerate(plan.rows):
            runs = results[r * len(seeds):(r + 1) * len(seeds)]
            names = [name for name in METRIC_COLUMNS if all(name in run for run in runs)]
            rows.append({
                "name": row.name,
                "mean": {n: float(np.mean([run[n] for run in runs])) for n in names},
                "std": {n: float(np.std([run[n] for run in runs])) for n in names},
            })
        baseline = {}
        protocol, train = self.run_config.protocol, self.run_config.train
        if protocol.cam_samples:
            baseline["cam_iou"] = cam_iou_on_test(self.encoder, None, self.dataset, protocol.cam_samples, train.beta, train.upsample)
            self.logger.info(f"Unprompted CAM IoU {baseline['cam_iou']:.4f}")
        return AblationTable(plan.name, seeds, rows, baseline)


def run_ablation(plan: AblationPlan, run_config, encoder, dataset, workers: Optional[int] = None) -> AblationTable:
    return AblationRunner(encoder, dataset, run_config, workers).run(plan)
