"""Command-line interface for lidarcl."""

import functools
import json
import logging
import sys
from pathlib import Path
from typing import Any

import click
from pydantic import ValidationError
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table
from sqlalchemy import select

from lidarcl.config import Config
from lidarcl.db import RUNLOG_NAME, ExperimentRun, get_session, init_db
from lidarcl.errors import ConfigError, DataError, LidarclError
from lidarcl.experiment import (
    DEFAULT_ABLATION_GRID,
    ExperimentSpec,
    Trainer,
    evaluate_checkpoint,
    experiment_taxonomy,
    format_validation_error,
    read_reports,
    run_ablation,
)
from lidarcl.ingest.base import open_source
from lidarcl.ingest.synthetic import SynthConfig, generate_synthetic, write_synthetic
from lidarcl.metrics import StepReport
from lidarcl.scenario import build_step, make_plan, summarize_plan, write_step
from lidarcl.tables import ablation_table, per_class_table, steps_table

console = Console()

SCENARIO_CHOICES = ["sequential", "sequential_masked", "disjoint", "overlapped", "coarse_to_fine", "c2f"]
STRATEGY_CHOICES = ["fine_tune", "kd", "self_inpaint", "kd_plus_inpaint"]
KD_MODE_CHOICES = ["none", "output", "feature_l1", "feature_l2", "both"]
VARIANT_CHOICES = ["standard", "joined_unknowns", "coarse_sum"]


def exits_on_error(func):
    """Print lidarcl errors in red and exit with their code."""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except ValidationError as e:
            console.print(f"[red]Config error: {format_validation_error(e)}[/red]")
            sys.exit(ConfigError.exit_code)
        except LidarclError as e:
            kind = {2: "Config error", 3: "Data error", 4: "Numerical error"}.get(e.exit_code, "Error")
            console.print(f"[red]{kind}: {e}[/red]")
            sys.exit(e.exit_code)

    return wrapper


def _merge(base: dict, override: dict) -> dict:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def _read_json(path: Path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: line {e.lineno}: {e.msg}") from e


def build_spec(config: Config, spec_path: Path | None, overrides: dict[str, Any]) -> ExperimentSpec:
    """CLI flags over spec file over user config over defaults."""
    data = _read_json(spec_path) if spec_path else {}
    name = overrides.get("name") or data.get("name") or "experiment"
    defaults: dict[str, Any] = {"output_dir": str(config.get_output_dir() / name)}
    seed = config.get("train.seed")
    if seed is not None:
        defaults["train"] = {"seed": int(seed)}
        defaults["dataset"] = {"synth": {"seed": int(seed)}}
    merged = _merge(_merge(defaults, data), overrides)

    dataset = merged.setdefault("dataset", {})
    if dataset.get("kind", "synthetic") == "synthetic":
        dataset.setdefault("synth", {}).setdefault("taxonomy", merged.get("taxonomy", "desk"))
    elif not dataset.get("root"):
        root = config.get_dataset_root()
        if root is not None:
            dataset["root"] = str(root)
    return ExperimentSpec.model_validate(merged)


def _overrides(**flags) -> dict[str, Any]:
    """Nested spec fields from CLI flags that were given."""
    out: dict[str, Any] = {}

    def put(path: str, value: Any) -> None:
        if value is None:
            return
        node = out
        keys = path.split(".")
        for key in keys[:-1]:
            node = node.setdefault(key, {})
        node[keys[-1]] = value

    put("name", flags.get("name"))
    put("scenario", flags.get("scenario"))
    put("strategy", flags.get("strategy"))
    put("taxonomy", flags.get("taxonomy"))
    put("baseline", flags.get("baseline") or None)
    put("output_dir", str(flags["out"]) if flags.get("out") else None)
    put("train.seed", flags.get("seed"))
    put("dataset.synth.seed", flags.get("seed"))
    put("dataset.synth.taxonomy", flags.get("taxonomy"))
    put("train.epochs_per_class", flags.get("epochs_per_class"))
    put("train.schedule_unit", flags.get("schedule_unit"))
    put("inpaint.tau1", flags.get("tau1"))
    put("inpaint.tau2", flags.get("tau2"))
    put("loss.lambda", flags.get("lambda_"))
    put("loss.kd_mode", flags.get("kd_mode"))
    put("loss.output_variant", flags.get("variant"))
    if flags.get("data"):
        put("dataset.root", str(flags["data"]))
    return out


def spec_options(func):
    """Options shared by commands that resolve an ExperimentSpec."""
    options = [
        click.option("--spec", "spec_path", type=click.Path(exists=True, path_type=Path), help="Experiment spec JSON"),
        click.option("--name", default=None, help="Experiment name"),
        click.option("--scenario", type=click.Choice(SCENARIO_CHOICES, case_sensitive=False), default=None),
        click.option("--strategy", type=click.Choice(STRATEGY_CHOICES, case_sensitive=False), default=None),
        click.option("--taxonomy", default=None, help="Built-in taxonomy (cil, c2f, desk) or file"),
        click.option("--baseline", is_flag=True, help="Train all classes in a single step"),
        click.option("--seed", type=int, default=None),
        click.option("--out", type=click.Path(path_type=Path), default=None, help="Output directory"),
        click.option("--data", type=click.Path(exists=True, file_okay=False, path_type=Path), default=None,
                     help="Dataset root (synthetic manifest or SemanticKITTI)"),
        click.option("--tau1", type=float, default=None, help="Inpainting margin threshold"),
        click.option("--tau2", type=float, default=None, help="Inpainting confidence threshold"),
        click.option("--lambda", "lambda_", type=float, default=None, help="Distillation weight"),
        click.option("--kd-mode", type=click.Choice(KD_MODE_CHOICES, case_sensitive=False), default=None),
        click.option("--variant", type=click.Choice(VARIANT_CHOICES, case_sensitive=False), default=None,
                     help="Output distillation variant"),
        click.option("--epochs-per-class", type=int, default=None),
        click.option("--schedule-unit", type=click.Choice(["epoch", "iteration"]), default=None),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def _print_step(report: StepReport) -> None:
    groups = ", ".join(f"{100 * v:.1f}" if v is not None else "-" for v in report.miou_steps)
    miou = f"{100 * report.miou:.1f}" if report.miou is not None else "-"
    line = f"  step {report.step}: mIoU {miou}  (per step: {groups})  PA {100 * report.pa:.1f}"
    if report.inpaint is not None:
        line += f"  inpainted {report.inpaint.inpainted}/{report.inpaint.candidates}"
    console.print(line)


@click.group()
@click.option("--verbose", "-v", is_flag=True, help="Debug logging")
@click.pass_context
def cli(ctx, verbose: bool):
    """lidarcl - continual learning for LiDAR segmentation."""
    ctx.ensure_object(dict)
    ctx.obj["config"] = Config()
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.WARNING,
        format="%(message)s",
        handlers=[RichHandler(console=console, show_path=False)],
        force=True,
    )


@cli.command()
@click.argument("key")
@click.argument("value")
@click.pass_context
def config(ctx, key: str, value: str):
    """Set a configuration value."""
    cfg = ctx.obj["config"]
    cfg.set(key, value)
    console.print(f"[green]Set {key} = {value}[/green]")


@cli.command()
@click.option("--config", "config_path", type=click.Path(exists=True, path_type=Path), help="SynthConfig JSON")
@click.option("--seed", type=int, default=None)
@click.option("--taxonomy", default=None)
@click.option("--scans-per-group", type=int, default=None)
@click.option("--points-per-scan", type=int, default=None)
@click.option("--out", type=click.Path(path_type=Path), required=True, help="Dataset directory")
@exits_on_error
def synth(config_path: Path | None, seed, taxonomy, scans_per_group, points_per_scan, out: Path):
    """Generate a synthetic dataset in the SemanticKITTI layout."""
    data = _read_json(config_path) if config_path else {}
    flags = {"seed": seed, "taxonomy": taxonomy, "scans_per_group": scans_per_group,
             "points_per_scan": points_per_scan}
    data.update({k: v for k, v in flags.items() if v is not None})
    synth_config = SynthConfig.model_validate(data)

    console.print(f"[blue]Generating synthetic data (seed {synth_config.seed})...[/blue]")
    dataset = generate_synthetic(synth_config)
    manifest = write_synthetic(dataset, out)

    table = Table(title="Synthetic dataset")
    table.add_column("Sequence", style="cyan")
    table.add_column("Role")
    table.add_column("Scans", justify="right")
    table.add_column("Points", justify="right")
    for seq, group in zip(dataset.group_sequences, dataset.groups):
        table.add_row(seq, "train", str(len(group)), str(sum(c.num_points for c in group)))
    table.add_row(dataset.validation_sequence, "validation", str(len(dataset.validation)),
                  str(sum(c.num_points for c in dataset.validation)))
    console.print(table)
    console.print(f"[green]Wrote {manifest}[/green]")


@cli.command()
@spec_options
@click.pass_context
@exits_on_error
def plan(ctx, spec_path, **flags):
    """Write per-step label manifests and summarize the scenario."""
    spec = build_spec(ctx.obj["config"], spec_path, _overrides(**flags))
    taxonomy = experiment_taxonomy(spec)
    source = open_source(spec.dataset, taxonomy)
    scenario_plan = make_plan(spec.scenario, taxonomy, source)

    steps_dir = Path(spec.output_dir) / "steps"
    for k in range(scenario_plan.num_steps):
        write_step(build_step(scenario_plan, k, source), steps_dir)
    summaries = summarize_plan(scenario_plan, source)
    summary_path = Path(spec.output_dir) / "plan_summary.json"
    summary_path.write_text(
        json.dumps([s.model_dump() for s in summaries], indent=2) + "\n", encoding="utf-8"
    )

    table = Table(title=f"{spec.scenario.value} plan")
    table.add_column("Step", style="cyan")
    table.add_column("Scans", justify="right")
    table.add_column("Labeled %", justify="right")
    for name in taxonomy.names:
        table.add_column(name, justify="right")
    for s in summaries:
        table.add_row(str(s.step), str(s.scans), f"{s.labeled_pct:.1f}",
                      *[f"{100 * s.class_share[n]:.0f}%" for n in taxonomy.names])
    console.print(table)
    console.print(f"[green]Step manifests in {steps_dir}[/green]")


@cli.command()
@spec_options
@click.pass_context
@exits_on_error
def train(ctx, spec_path, **flags):
    """Run an incremental experiment."""
    spec = build_spec(ctx.obj["config"], spec_path, _overrides(**flags))
    console.print(
        f"[blue]Training {spec.name}: {spec.scenario.value} / {spec.strategy.value} "
        f"-> {spec.output_dir}[/blue]"
    )
    trainer = Trainer(spec, on_step=_print_step)
    reports = trainer.run_experiment()

    console.print(steps_table({spec.name: reports}).to_rich())
    console.print(f"[green]Training complete! Reports in {Path(spec.output_dir) / 'reports'}[/green]")


@cli.command("eval")
@click.argument("checkpoint", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--step", "k", type=int, required=True, help="Learning step the checkpoint belongs to")
@click.option("--json-out", type=click.Path(path_type=Path), default=None)
@spec_options
@click.pass_context
@exits_on_error
def evaluate(ctx, checkpoint: Path, k: int, json_out: Path | None, spec_path, **flags):
    """Score a checkpoint on the validation split."""
    spec = build_spec(ctx.obj["config"], spec_path, _overrides(**flags))
    report = evaluate_checkpoint(checkpoint, spec, k)

    table = Table(title=f"{checkpoint.name} at step {k}")
    table.add_column("Class", style="cyan")
    table.add_column("IoU", justify="right")
    for name, value in report.per_class_iou.items():
        table.add_row(name, f"{100 * value:.1f}" if value is not None else "-")
    console.print(table)
    _print_step(report)
    if json_out:
        json_out.write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")
        console.print(f"[green]Wrote {json_out}[/green]")


@cli.command()
@click.argument("runs", nargs=-1, required=True, type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option("--out", type=click.Path(path_type=Path), default=None, help="Directory for CSV/markdown tables")
@exits_on_error
def report(runs: tuple[Path, ...], out: Path | None):
    """Cross-run tables from experiment output directories."""
    results: dict[str, list[StepReport]] = {}
    for run_dir in runs:
        reports_dir = run_dir / "reports" if (run_dir / "reports").is_dir() else run_dir
        results[run_dir.name] = read_reports(reports_dir)

    tables = {
        "steps": steps_table(results),
        "per_class": per_class_table({label: reps[-1] for label, reps in results.items()}),
    }
    for stem, table in tables.items():
        console.print(table.to_rich())
        if out:
            for path in table.write(out, stem):
                console.print(f"[green]Wrote {path}[/green]")


@cli.command()
@spec_options
@click.option("--grid", default=None, help="tau1:tau2 pairs, e.g. '0:0,0.2:0.7'")
@click.pass_context
@exits_on_error
def ablate(ctx, spec_path, grid: str | None, **flags):
    """Self-inpainting over a grid of thresholds."""
    spec = build_spec(ctx.obj["config"], spec_path, _overrides(**flags))
    pairs = DEFAULT_ABLATION_GRID
    if grid:
        try:
            pairs = tuple(tuple(float(x) for x in item.split(":")) for item in grid.split(","))
        except ValueError:
            raise ConfigError(f"invalid --grid '{grid}'; expected tau1:tau2 pairs") from None
        if any(len(p) != 2 for p in pairs):
            raise ConfigError(f"invalid --grid '{grid}'; expected tau1:tau2 pairs")

    console.print(f"[blue]Inpainting ablation over {len(pairs)} threshold pairs...[/blue]")
    results = run_ablation(spec, pairs)
    table = ablation_table(results)
    console.print(table.to_rich())
    for path in table.write(Path(spec.output_dir), "ablation"):
        console.print(f"[green]Wrote {path}[/green]")


@cli.command()
@click.option("--out", type=click.Path(path_type=Path), default=None, help="Experiment output directory")
@click.option("--limit", type=int, default=10)
@click.pass_context
@exits_on_error
def status(ctx, out: Path | None, limit: int):
    """Show recent runs from the run log."""
    run_dir = out or ctx.obj["config"].get_output_dir()
    db_paths = [run_dir / RUNLOG_NAME] if (run_dir / RUNLOG_NAME).exists() else sorted(run_dir.glob(f"*/{RUNLOG_NAME}"))
    if not db_paths:
        console.print(f"[yellow]No run log under {run_dir}. Run 'lidarcl train' first.[/yellow]")
        return

    table = Table(title="Recent runs")
    table.add_column("Name", style="cyan")
    table.add_column("Scenario")
    table.add_column("Strategy")
    table.add_column("Status")
    table.add_column("Steps", justify="right")
    table.add_column("Final mIoU", justify="right")
    table.add_column("Started", style="dim")
    for db_path in db_paths:
        init_db(db_path)
        session = get_session(db_path)
        try:
            stmt = select(ExperimentRun).order_by(ExperimentRun.started_at.desc()).limit(limit)
            for run in session.execute(stmt).scalars():
                status_style = {"success": "green", "failed": "red"}.get(run.status, "yellow")
                table.add_row(
                    run.name,
                    run.scenario,
                    run.strategy,
                    f"[{status_style}]{run.status}[/{status_style}]",
                    str(run.steps_completed),
                    f"{100 * run.final_miou:.1f}" if run.final_miou is not None else "-",
                    run.started_at.strftime("%Y-%m-%d %H:%M"),
                )
                if run.error_message:
                    table.add_row("", "", "", f"[dim]{run.error_message}[/dim]", "", "", "")
        finally:
            session.close()
    console.print(table)


if __name__ == "__main__":
    cli()
