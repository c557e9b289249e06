"""UI module for surfreg with rich terminal output."""

import json
import math
from contextlib import contextmanager
from typing import Any, Dict, Iterator, List, Sequence

from rich.console import Console
from rich.panel import Panel
from rich.progress import BarColumn, Progress, TextColumn, TimeElapsedColumn
from rich.table import Table


def _threshold_caption(rows: Sequence[Any]) -> str:
    if not rows:
        return ""
    return f"foreground: accumulation ≥ {rows[0].background_threshold:g}"


def _num(value: float, digits: int = 3) -> str:
    if math.isnan(value):
        return "n/a"
    if value == float("inf"):
        return "inf"
    return f"{value:.{digits}f}"


class UIManager:
    """Manages UI rendering and display."""

    def __init__(self, console: Console = None):
        self.console = console or Console()

    def print_success(self, message: str):
        """Print success message."""
        self.console.print(f"✅ {message}", style="bold green")

    def print_error(self, message: str):
        """Print error message."""
        self.console.print(f"❌ {message}", style="bold red")

    def print_warning(self, message: str):
        """Print warning message."""
        self.console.print(f"⚠️  {message}", style="bold yellow")

    def print_info(self, message: str):
        """Print info message."""
        self.console.print(f"ℹ️  {message}", style="bold blue")

    def print_json(self, data: Any):
        """Print data as formatted JSON."""
        json_str = json.dumps(data, indent=2, ensure_ascii=False, default=str)
        self.console.print(json_str)

    def display_schedule_preview(self, rows: List[Dict[str, float]], total_iterations: int):
        """Stage table of a curriculum schedule."""
        table = Table(title="📅 Regularisation schedule")
        table.add_column("Stage", justify="right", style="cyan")
        table.add_column("Iterations", style="white")
        table.add_column("Period", justify="right", style="magenta")
        table.add_column("Reg steps", justify="right", style="green")
        table.add_column("Cumulative", justify="right", style="green")
        table.add_column("Overhead", justify="right", style="yellow")

        for row in rows:
            table.add_row(
                str(row["stage"]),
                f"{row['start']}–{row['end'] - 1}",
                str(row["period"]),
                str(row["reg_steps"]),
                str(row["cumulative"]),
                f"{row['overhead_pct']:.1f}%",
            )
        self.console.print(table)

        if rows:
            last = rows[-1]
            summary = (
                f"[bold]Regularised steps:[/bold] {last['cumulative']} of {total_iterations}\n"
                f"[bold]Estimated overhead:[/bold] {last['overhead_pct']:.1f}% "
                f"(one extra step-equivalent per regularised step)"
            )
            self.console.print(Panel(summary, border_style="blue"))

    def display_losses(self, rows: Sequence[Dict[str, float]]):
        """Per-ray regularisation losses."""
        table = Table(title="🧮 Surface losses")
        table.add_column("Ray", justify="right", style="cyan")
        for name in ("L_d", "L_n", "L_b", "L_s", "w_star"):
            table.add_column(name, justify="right")
        for row in rows:
            table.add_row(
                str(row["ray_id"]),
                *(f"{row[name]:.4e}" for name in ("L_d", "L_n", "L_b", "L_s", "w_star")),
            )
        self.console.print(table)

    def display_metrics(self, rows: Sequence[Any], title: str = "📊 View metrics"):
        """Per-view PSNR, normal error and disparity error."""
        table = Table(title=title, caption=_threshold_caption(rows))
        table.add_column("View", justify="right", style="cyan")
        table.add_column("PSNR (dB)", justify="right", style="green")
        table.add_column("Normal MAE (°)", justify="right", style="magenta")
        table.add_column("Median (°)", justify="right", style="magenta")
        table.add_column("Disparity RMSE", justify="right", style="yellow")
        table.add_column("Coverage", justify="right", style="blue")
        for row in rows:
            table.add_row(
                "mean" if row.view_id < 0 else str(row.view_id),
                _num(row.psnr_db, 2),
                _num(row.normal_mae_deg, 2),
                _num(row.normal_median_mae_deg, 2),
                _num(row.disparity_rmse, 4),
                _num(row.coverage, 2),
            )
        self.console.print(table)

    def display_report(self, report):
        """Experiment summary with paired deltas and ablation rows."""
        table = Table(title="🧪 Experiment report")
        table.add_column("Run", style="cyan")
        table.add_column("PSNR (dB)", justify="right", style="green")
        table.add_column("Normal MAE (°)", justify="right", style="magenta")
        table.add_column("Disparity RMSE", justify="right", style="yellow")
        for name, summary in report.runs.items():
            table.add_row(
                name,
                _num(summary.psnr_db, 2),
                _num(summary.normal_mae_deg, 2),
                _num(summary.disparity_rmse, 4),
            )
        self.console.print(table)

        if report.deltas:
            deltas = report.deltas
            better = deltas["normal_mae_deg"] < 0 and deltas["disparity_rmse"] < 0
            text = (
                f"[bold]Δ normal MAE:[/bold] {deltas['normal_mae_deg']:+.3f}°\n"
                f"[bold]Δ disparity RMSE:[/bold] {deltas['disparity_rmse']:+.5f}\n"
                f"[bold]Δ PSNR:[/bold] {deltas['psnr_db']:+.3f} dB"
            )
            self.console.print(
                Panel(text, title="Treatment − control", border_style="green" if better else "yellow")
            )

    def display_samples(self, rows: Sequence[Sequence[float]]):
        """Lattice directions and ball points."""
        table = Table(title="🌐 Sphere samples")
        for name in ("i", "dir_x", "dir_y", "dir_z", "radius", "ball_x", "ball_y", "ball_z"):
            table.add_column(name, justify="right")
        for row in rows:
            table.add_row(str(int(row[0])), *(f"{v:+.5f}" for v in row[1:]))
        self.console.print(table)

    @contextmanager
    def training_progress(self, total: int, description: str = "Training") -> Iterator:
        """Progress bar; yields a callback advancing it by one iteration."""
        progress = Progress(
            TextColumn("[bold blue]{task.description}"),
            BarColumn(),
            TextColumn("{task.completed}/{task.total}"),
            TextColumn("{task.fields[status]}"),
            TimeElapsedColumn(),
            console=self.console,
            transient=True,
        )
        with progress:
            task = progress.add_task(description, total=total, status="")

            def advance(report):
                status = f"mse {report.photometric:.5f}" + (" [reg]" if report.is_reg_step else "")
                progress.update(task, advance=1, status=status)

            yield advance
