"""Result tables built from step reports."""

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from rich.table import Table

from lidarcl.inpaint import InpaintConfig
from lidarcl.metrics import StepReport
from lidarcl.scenario import ScenarioKind
from lidarcl.taxonomy import ClassTaxonomy

Cell = str | float | None


def _pct(value: Cell, digits: int) -> str:
    if value is None:
        return "-"
    if isinstance(value, str):
        return value
    return f"{100.0 * value:.{digits}f}"


@dataclass
class ResultTable:
    """Header plus rows; float cells are fractions shown as percentages."""

    title: str
    headers: list[str]
    rows: list[list[Cell]] = field(default_factory=list)

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(self.headers)
        for row in self.rows:
            writer.writerow([_pct(cell, 2) for cell in row])
        return buffer.getvalue()

    def to_markdown(self) -> str:
        lines = [
            "| " + " | ".join(self.headers) + " |",
            "|" + "|".join("---" for _ in self.headers) + "|",
        ]
        for row in self.rows:
            lines.append("| " + " | ".join(_pct(cell, 1) for cell in row) + " |")
        return "\n".join(lines) + "\n"

    def to_rich(self) -> Table:
        table = Table(title=self.title)
        for i, header in enumerate(self.headers):
            if i == 0:
                table.add_column(header, style="cyan")
            else:
                table.add_column(header, justify="right")
        for row in self.rows:
            table.add_row(*[_pct(cell, 1) for cell in row])
        return table

    def write(self, directory: Path, stem: str) -> list[Path]:
        directory.mkdir(parents=True, exist_ok=True)
        csv_path = directory / f"{stem}.csv"
        md_path = directory / f"{stem}.md"
        csv_path.write_text(self.to_csv(), encoding="utf-8")
        md_path.write_text(f"## {self.title}\n\n" + self.to_markdown(), encoding="utf-8")
        return [csv_path, md_path]


def _step_headers(k: int) -> list[str]:
    if k == 0:
        return ["k=0 mIoU_0"]
    return [f"k={k} mIoU_{j}" for j in range(k + 1)] + [f"k={k} mIoU_0-{k}"]


def _step_cells(reports: Sequence[StepReport], k: int) -> list[Cell]:
    if k >= len(reports):
        return [None] * len(_step_headers(k))
    rep = reports[k]
    if k == 0:
        return [rep.miou]
    return [*rep.miou_steps, rep.miou]


def steps_table(runs: dict[str, Sequence[StepReport]], title: str = "mIoU per learning step") -> ResultTable:
    """One row per run: mIoU of every step group after every step, then overall."""
    num_steps = max((len(r) for r in runs.values()), default=0)
    headers = ["Method"] + [h for k in range(num_steps) for h in _step_headers(k)]
    table = ResultTable(title, headers)
    for label, reports in runs.items():
        table.rows.append([label] + [c for k in range(num_steps) for c in _step_cells(reports, k)])
    return table


def per_class_table(runs: dict[str, StepReport], title: str = "Per-class IoU") -> ResultTable:
    """One row per run's final report: IoU per class and mIoU."""
    names: list[str] = []
    for rep in runs.values():
        names += [n for n in rep.class_names if n not in names]
    table = ResultTable(title, ["Method", *names, "mIoU"])
    for label, rep in runs.items():
        table.rows.append([label] + [rep.per_class_iou.get(n) for n in names] + [rep.miou])
    return table


def per_step_table(reports: Sequence[StepReport], taxonomy: ClassTaxonomy, title: str = "Per-step IoU") -> ResultTable:
    """One row per step over the fine classes; a coarse class's IoU spans its fine columns."""
    table = ResultTable(title, ["Step", *taxonomy.names, "mIoU", "sigma", "PA", "PP"])
    for rep in reports:
        cells: list[Cell] = [str(rep.step)]
        for cid in taxonomy.fine_classes:
            name = taxonomy.name_of(cid)
            if rep.scenario == ScenarioKind.COARSE_TO_FINE.value:
                name = taxonomy.name_of(taxonomy.ancestor(cid, rep.step))
            cells.append(rep.per_class_iou.get(name))
        cells += [rep.miou, rep.sigma, rep.pa, rep.pp]
        table.rows.append(cells)
    return table


def ablation_table(
    runs: Sequence[tuple[InpaintConfig, Sequence[StepReport]]],
    title: str = "Inpainting thresholds",
) -> ResultTable:
    """Final-step mIoU per step group for each (tau1, tau2)."""
    last = max((len(r) - 1 for _, r in runs), default=0)
    headers = ["tau1", "tau2"] + [f"mIoU_{j}" for j in range(last + 1)] + [f"mIoU_0-{last}"]
    table = ResultTable(title, headers)
    for cfg, reports in runs:
        final = reports[-1]
        table.rows.append([f"{cfg.tau1:g}", f"{cfg.tau2:g}", *final.miou_steps, final.miou])
    return table


def write_run_tables(label: str, reports: Sequence[StepReport], taxonomy: ClassTaxonomy, directory: Path) -> list[Path]:
    """Summary tables of one experiment next to its reports."""
    paths = steps_table({label: reports}).write(directory, "steps")
    paths += per_class_table({label: reports[-1]}).write(directory, "per_class")
    paths += per_step_table(reports, taxonomy).write(directory, "per_step")
    return paths
