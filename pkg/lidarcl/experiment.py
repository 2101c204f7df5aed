"""Incremental training loop.

For every learning step k the trainer builds the step's training set,
optionally inpaints it with the previous model, grows the classifier head,
trains with Adam under a polynomial learning-rate decay, evaluates on the
validation split and persists a checkpoint plus a JSON report.

Learning rate within step k, with t counting epochs (default) or updates:

    lr(t) = carry * (1 - t / total) ** power

At step 0 carry is the initial rate; afterwards it is the last rate applied in the previous step.
"""

import json
import logging
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from sqlalchemy.orm import Session

from lidarcl.db import RUNLOG_NAME, ExperimentRun, LRRecord, StepRun, get_session, init_db, utcnow
from lidarcl.errors import ConfigError, DataError
from lidarcl.ingest.base import CloudSource, DatasetConfig, open_source
from lidarcl.ingest.semantickitti import ScanId
from lidarcl.inpaint import InpaintConfig, InpaintStats, inpaint_step
from lidarcl.losses import KDMode, LossConfig, Objective, OutputVariant
from lidarcl.metrics import ConfusionMatrix, StepReport, accumulate, evaluation_matrix, report
from lidarcl.model import (
    SegmenterState,
    Standardizer,
    adam_update,
    expand_head,
    forward,
    gradients,
    init_state,
    load_checkpoint,
    save_checkpoint,
)
from lidarcl.scenario import (
    ScenarioKind,
    ScenarioPlan,
    active_classes,
    build_step,
    evaluation_labels,
    make_plan,
    new_classes,
    write_step,
)
from lidarcl.tables import write_run_tables
from lidarcl.taxonomy import BACKGROUND, ClassTaxonomy, resolve_taxonomy

logger = logging.getLogger(__name__)

DEFAULT_ABLATION_GRID = ((0.0, 0.0), (0.2, 0.0), (0.0, 0.7), (0.2, 0.7))


class Strategy(str, Enum):
    """How old knowledge is carried into a new step."""
    FINE_TUNE = "fine_tune"
    KD = "kd"
    SELF_INPAINT = "self_inpaint"
    KD_PLUS_INPAINT = "kd_plus_inpaint"

    @classmethod
    def parse(cls, text: str) -> "Strategy":
        key = text.strip().lower().replace("-", "_").replace("+", "_plus_").replace(" ", "_")
        aliases = {"ft": "fine_tune", "finetune": "fine_tune", "inpaint": "self_inpaint"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise ConfigError(f"unknown strategy '{text}'. Use one of: {[s.value for s in cls]}") from None

    @property
    def uses_kd(self) -> bool:
        return self in (Strategy.KD, Strategy.KD_PLUS_INPAINT)

    @property
    def uses_inpaint(self) -> bool:
        return self in (Strategy.SELF_INPAINT, Strategy.KD_PLUS_INPAINT)


class TrainConfig(BaseModel):
    """Optimizer and schedule settings."""

    model_config = ConfigDict(extra="forbid")

    initial_lr: float = Field(0.01, gt=0.0)
    lr_power: float = Field(0.95, gt=0.0)
    batch_size: int = Field(3, ge=1)
    epochs_per_class: int = Field(2, ge=1)
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = Field(1e-8, gt=0.0)
    seed: int = 0
    schedule_unit: Literal["epoch", "iteration"] = "epoch"

    @field_validator("betas")
    @classmethod
    def _check_betas(cls, value: tuple[float, float]) -> tuple[float, float]:
        if not all(0.0 < b < 1.0 for b in value):
            raise ValueError("Adam decay rates must lie in (0, 1)")
        return value


class ExperimentSpec(BaseModel):
    """Everything needed to reproduce one incremental run."""

    model_config = ConfigDict(extra="forbid")

    name: str = "experiment"
    scenario: ScenarioKind = ScenarioKind.DISJOINT
    taxonomy: str = "desk"
    # train every class in a single step (from-scratch reference)
    baseline: bool = False
    strategy: Strategy = Strategy.FINE_TUNE
    loss: LossConfig = Field(default_factory=LossConfig)
    inpaint: InpaintConfig = Field(default_factory=InpaintConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    output_dir: Path = Path("runs") / "experiment"

    @field_validator("scenario", mode="before")
    @classmethod
    def _parse_scenario(cls, value):
        return ScenarioKind.parse(value) if isinstance(value, str) else value

    @field_validator("strategy", mode="before")
    @classmethod
    def _parse_strategy(cls, value):
        return Strategy.parse(value) if isinstance(value, str) else value

    @model_validator(mode="after")
    def _check_compatibility(self) -> "ExperimentSpec":
        if self.strategy.uses_inpaint and not self.scenario.produces_background:
            raise ValueError(
                f"{self.strategy.value} needs background labels; scenario {self.scenario.value} "
                "has none (use disjoint or overlapped)"
            )
        if self.strategy.uses_kd and self.loss.kd_mode is KDMode.NONE:
            raise ValueError(f"{self.strategy.value} strategy requires a kd_mode other than none")
        if (
            self.strategy.uses_kd
            and self.loss.output_variant is OutputVariant.COARSE_SUM
            and self.scenario is not ScenarioKind.COARSE_TO_FINE
        ):
            raise ValueError("coarse_sum distillation applies to the coarse_to_fine scenario only")
        if (
            self.strategy.uses_kd
            and self.loss.output_variant is OutputVariant.JOINED_UNKNOWNS
            and not self.scenario.produces_background
        ):
            raise ValueError("joined_unknowns distillation needs a background class (disjoint or overlapped)")
        return self


def load_spec(path: Path) -> ExperimentSpec:
    """Read an experiment spec JSON file."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"spec file not found: {path}")
    try:
        return ExperimentSpec.model_validate_json(path.read_text(encoding="utf-8"))
    except ValidationError as e:
        raise ConfigError(f"{path}: {format_validation_error(e)}") from e


def format_validation_error(error: ValidationError) -> str:
    first = error.errors()[0]
    where = ".".join(str(p) for p in first["loc"])
    return f"{where}: {first['msg']}" if where else first["msg"]


def experiment_taxonomy(spec: ExperimentSpec) -> ClassTaxonomy:
    taxonomy = resolve_taxonomy(spec.taxonomy)
    return taxonomy.collapsed() if spec.baseline else taxonomy


# -- schedule ----------------------------------------------------------------

def lr_at(cfg: TrainConfig, k: int, t: int, total: int, lr_carry: float | None = None) -> float:
    """Polynomial decay of ``lr_carry`` at position ``t`` of ``total`` ticks."""
    if total <= 0:
        raise ConfigError("learning-rate schedule needs at least one tick")
    if not 0 <= t <= total:
        raise ConfigError(f"schedule position {t} outside [0, {total}]")
    if lr_carry is None:
        if k != 0:
            raise ConfigError(f"step {k} needs the last learning rate of step {k - 1}")
        lr_carry = cfg.initial_lr
    return lr_carry * (1.0 - t / total) ** cfg.lr_power


def epochs_for_step(cfg: TrainConfig, kind: ScenarioKind, taxonomy: ClassTaxonomy, k: int) -> int:
    """epochs_per_class epochs for every class introduced at step k."""
    return max(1, cfg.epochs_per_class * len(new_classes(kind, taxonomy, k)))


# -- evaluation --------------------------------------------------------------

def evaluate(
    state: SegmenterState,
    kind: ScenarioKind,
    taxonomy: ClassTaxonomy,
    k: int,
    source: CloudSource,
    scan_ids: Iterable[ScanId] | None = None,
) -> ConfusionMatrix:
    """Confusion matrix on held-out scans over the classes known at step k.

    Predictions are restricted to head rows that are BACKGROUND or scored at
    this step.
    """
    cm = evaluation_matrix(kind, taxonomy, k)
    allowed = set(cm.classes)
    for scan_id in source.validation_scans() if scan_ids is None else scan_ids:
        cloud = source.load(scan_id)
        truth = evaluation_labels(kind, taxonomy, k, cloud.labels)
        cm = accumulate(cm, truth, forward(state, cloud).argmax_classes(allowed))
    return cm


def evaluate_checkpoint(checkpoint: Path, spec: ExperimentSpec, k: int, source: CloudSource | None = None) -> StepReport:
    """Score a saved model on the spec's validation split at step k."""
    taxonomy = experiment_taxonomy(spec)
    source = source or open_source(spec.dataset, taxonomy)
    state = load_checkpoint(checkpoint)
    cm = evaluate(state, spec.scenario, taxonomy, k, source)
    return report(cm, taxonomy, k, spec.scenario).model_copy(update={"strategy": spec.strategy.value})


# -- training ----------------------------------------------------------------

@dataclass
class StepResult:
    state: SegmenterState
    report: StepReport
    lr_carry: float


class Trainer:
    """Runs the learning steps of one ExperimentSpec."""

    def __init__(
        self,
        spec: ExperimentSpec,
        source: CloudSource | None = None,
        session: Session | None = None,
        on_step: Callable[[StepReport], None] | None = None,
    ):
        self.spec = spec
        self.taxonomy = experiment_taxonomy(spec)
        self.source = source or open_source(spec.dataset, self.taxonomy)
        if not self.source.validation_scans():
            raise DataError(f"{self.source.name} source has no validation scans to evaluate on")
        self.plan: ScenarioPlan = make_plan(spec.scenario, self.taxonomy, self.source)
        self.output_dir = Path(spec.output_dir)
        self.session = session
        self.on_step = on_step
        self._run: ExperimentRun | None = None

    # -- run log ---------------------------------------------------------------

    def _start_run(self) -> ExperimentRun | None:
        """Record the start of a run."""
        if self.session is None:
            return None
        run = ExperimentRun(
            name=self.spec.name,
            scenario=self.spec.scenario.value,
            strategy=self.spec.strategy.value,
            seed=self.spec.train.seed,
            started_at=utcnow(),
            status="running",
            spec_json=self.spec.model_dump_json(by_alias=True),
        )
        self.session.add(run)
        self.session.commit()
        return run

    def _complete_run(self, run: ExperimentRun | None, reports: list[StepReport]) -> None:
        """Record successful completion of a run."""
        if run is None:
            return
        run.completed_at = utcnow()
        run.status = "success"
        run.steps_completed = len(reports)
        run.final_miou = reports[-1].miou if reports else None
        self.session.commit()

    def _fail_run(self, run: ExperimentRun | None, error: str) -> None:
        """Record failed run."""
        if run is None:
            return
        run.completed_at = utcnow()
        run.status = "failed"
        run.error_message = error
        self.session.commit()

    def _start_step(self, k: int, scans: int) -> StepRun | None:
        if self.session is None or self._run is None:
            return None
        step_run = StepRun(
            run_id=self._run.id, step=k, started_at=utcnow(), status="running", scans=scans,
            lr_unit=self.spec.train.schedule_unit,
        )
        self.session.add(step_run)
        self.session.commit()
        return step_run

    def _finish_step(self, step_run: StepRun | None, error: str | None = None, **fields) -> None:
        if step_run is None:
            return
        step_run.completed_at = utcnow()
        step_run.status = "failed" if error else "success"
        step_run.error_message = error
        for name, value in fields.items():
            setattr(step_run, name, value)
        self.session.commit()

    # -- steps -----------------------------------------------------------------

    def _check_previous(self, k: int, prev_state: SegmenterState | None) -> None:
        if k == 0:
            if prev_state is not None:
                raise ConfigError("step 0 trains from scratch; got a previous model")
            return
        if prev_state is None:
            raise ConfigError(f"step {k} needs the model of step {k - 1}")
        known = {BACKGROUND}.union(*(active_classes(self.plan.kind, self.taxonomy, j) for j in range(k)))
        unknown = [c for c in prev_state.class_list if c not in known]
        if unknown:
            raise ConfigError(f"previous model has classes {unknown} not introduced before step {k}")

    def run_step(self, k: int, prev_state: SegmenterState | None = None, lr_carry: float | None = None) -> StepResult:
        """Train and evaluate learning step k."""
        self._check_previous(k, prev_state)
        spec, cfg = self.spec, self.spec.train
        steps_dir = self.output_dir / "steps"

        step_data = build_step(self.plan, k, self.source)
        if not step_data.scans:
            raise DataError(f"step {k} has no training scans")
        write_step(step_data, steps_dir)
        step_run = self._start_step(k, len(step_data.scans))
        try:
            stats: InpaintStats | None = None
            if k > 0 and spec.strategy.uses_inpaint:
                step_data, stats = inpaint_step(step_data, prev_state, spec.inpaint, self.taxonomy)
                write_step(step_data, steps_dir, suffix=".ip")

            if k == 0:
                standardizer = Standardizer.fit_clouds([step_data.points(s) for s in step_data.scan_ids])
                state = init_state(step_data.active_classes, standardizer, cfg.seed)
            else:
                grown = [c for c in step_data.active_classes if c not in prev_state.class_list]
                state = expand_head(prev_state, grown)

            state, lr_values, carry, iterations, epochs = self._train(
                k, state, prev_state, step_data, step_run, lr_carry
            )

            cm = evaluate(state, self.plan.kind, self.taxonomy, k, self.source)
            step_report = report(cm, self.taxonomy, k, self.plan.kind).model_copy(update={
                "strategy": spec.strategy.value,
                "inpaint": stats,
                "lr_unit": cfg.schedule_unit,
                "lr_values": lr_values,
                "config": spec.model_dump(mode="json", by_alias=True, exclude={"output_dir"}),
            })
            save_checkpoint(state, self.output_dir / "checkpoints" / f"step{k}.ckpt")
            report_path = self.output_dir / "reports" / f"step{k}.json"
            report_path.parent.mkdir(parents=True, exist_ok=True)
            report_path.write_text(step_report.model_dump_json(indent=2) + "\n", encoding="utf-8")
        except Exception as e:
            self._finish_step(step_run, error=str(e))
            raise

        self._finish_step(
            step_run, epochs=epochs, iterations=iterations, final_lr=carry, miou=step_report.miou,
            inpainted=stats.inpainted if stats else None,
        )
        logger.info("step %d done: mIoU %s over %d scans", k, step_report.miou, len(step_data.scans))
        return StepResult(state, step_report, carry)

    def _train(self, k, state, prev_state, step_data, step_run, lr_carry):
        spec, cfg = self.spec, self.spec.train
        use_kd = k > 0 and spec.strategy.uses_kd
        loss_cfg = spec.loss if use_kd else LossConfig(kd_mode=KDMode.NONE)
        level = k - 1 if self.taxonomy.has_hierarchy and k > 0 else None

        scan_ids = step_data.scan_ids
        labels_of = dict(step_data.scans)
        cached = {s: (step_data.points(s), labels_of[s]) for s in scan_ids}
        epochs = epochs_for_step(cfg, self.plan.kind, self.taxonomy, k)
        per_epoch = math.ceil(len(scan_ids) / cfg.batch_size)
        total = epochs if cfg.schedule_unit == "epoch" else epochs * per_epoch
        rng = np.random.default_rng([cfg.seed, k])

        lr_values: list[float] = []
        lr = cfg.initial_lr
        iteration = 0
        for epoch in range(epochs):
            order = rng.permutation(len(scan_ids))
            for b in range(per_epoch):
                tick = epoch if cfg.schedule_unit == "epoch" else iteration
                lr = lr_at(cfg, k, tick, total, lr_carry=cfg.initial_lr if k == 0 else lr_carry)
                if cfg.schedule_unit == "iteration" or b == 0:
                    lr_values.append(lr)
                batch = [cached[scan_ids[i]] for i in order[b * cfg.batch_size:(b + 1) * cfg.batch_size]]
                points = np.concatenate([p for p, _ in batch])
                labels = np.concatenate([l for _, l in batch])
                prev = forward(prev_state, points) if use_kd else None
                objective = Objective(labels, loss_cfg, prev, self.taxonomy, level)
                value, grads = gradients(state, objective, points)
                state = adam_update(state, grads, lr, cfg.betas, cfg.eps)
                if step_run is not None:
                    self.session.add(LRRecord(
                        step_run_id=step_run.id, iteration=iteration, tick=tick, lr=lr, loss=value.total,
                    ))
                iteration += 1
            logger.debug("step %d epoch %d: lr %.6g", k, epoch, lr)
        if step_run is not None:
            self.session.commit()
        return state, lr_values, lr, iteration, epochs

    def run_experiment(self) -> list[StepReport]:
        """All learning steps in order; reports already written survive a failure."""
        own_session = self.session is None
        if own_session:
            db_path = self.output_dir / RUNLOG_NAME
            init_db(db_path)
            self.session = get_session(db_path)
        self._run = self._start_run()
        reports: list[StepReport] = []
        state: SegmenterState | None = None
        carry: float | None = None
        try:
            for k in range(self.plan.num_steps):
                result = self.run_step(k, state, carry)
                state, carry = result.state, result.lr_carry
                reports.append(result.report)
                if self.on_step is not None:
                    self.on_step(result.report)
            write_run_tables(self.spec.name, reports, self.taxonomy, self.output_dir / "tables")
            self._complete_run(self._run, reports)
        except Exception as e:
            self._fail_run(self._run, str(e))
            raise
        finally:
            if own_session:
                self.session.close()
                self.session = None
        return reports


def run_experiment(spec: ExperimentSpec, source: CloudSource | None = None, session: Session | None = None) -> list[StepReport]:
    return Trainer(spec, source, session).run_experiment()


def run_ablation(
    spec: ExperimentSpec,
    grid: Iterable[tuple[float, float]] = DEFAULT_ABLATION_GRID,
    source: CloudSource | None = None,
    session: Session | None = None,
) -> list[tuple[InpaintConfig, list[StepReport]]]:
    """Self-inpainting over a grid of (tau1, tau2), one output directory each."""
    try:
        base = ExperimentSpec.model_validate(
            {**spec.model_dump(by_alias=True), "strategy": Strategy.SELF_INPAINT}
        )
    except ValidationError as e:
        raise ConfigError(format_validation_error(e)) from e
    source = source or open_source(spec.dataset, experiment_taxonomy(spec))
    results = []
    for tau1, tau2 in grid:
        cfg = InpaintConfig(tau1=tau1, tau2=tau2)
        member = base.model_copy(update={
            "inpaint": cfg,
            "name": f"{spec.name}-tau1={tau1:g}-tau2={tau2:g}",
            "output_dir": Path(spec.output_dir) / f"tau1_{tau1:g}_tau2_{tau2:g}",
        })
        results.append((cfg, Trainer(member, source, session).run_experiment()))
    return results


def read_reports(directory: Path) -> list[StepReport]:
    """Step reports of one run, in step order."""
    paths = sorted(Path(directory).glob("step*.json"), key=lambda p: int(p.stem[4:]))
    if not paths:
        raise DataError(f"no step reports in {directory}")
    try:
        return [StepReport.model_validate(json.loads(p.read_text(encoding="utf-8"))) for p in paths]
    except (json.JSONDecodeError, ValidationError) as e:
        raise DataError(f"unreadable report in {directory}: {e}") from e
