#!/usr/bin/env python3
"""Main CLI application for surfreg."""

import csv
import io
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import torch
import typer
from rich.console import Console

from .config import RunConfig, load_config, save_config
from .errors import ConfigError, SurfRegError
from .experiment import ExperimentSpec, evaluate, run_experiment
from .geometry import Ray
from .io import (
    load_checkpoint,
    read_cameras,
    read_dataset,
    write_cameras,
    write_dataset,
    write_f32,
    write_ppm,
    write_reg_batch,
)
from .log import setup_logging
from .metrics import metrics, summarize, write_metrics_csv
from .renderer import render_view
from .scene import AnalyticScene, orbit_cameras, render_ground_truth
from .schedule import CurriculumSchedule, schedule_preview
from .sphere import LatticeConfig, SphereSampler, random_rotation, rotation_stream
from .trainer import TrainingData, apply_thread_limit, finetune, probe_losses, torch_dtype, train
from .ui import UIManager

app = typer.Typer(
    name="surfreg",
    help="Surface light-field regularisation for radiance fields",
    rich_markup_mode="rich"
)

console = Console()
ui_manager = UIManager(console)

SAMPLE_HEADER = ["i", "dir_x", "dir_y", "dir_z", "radius", "ball_x", "ball_y", "ball_z"]
LOSSES_HEADER = ["ray_id", "L_d", "L_n", "L_b", "L_s", "w_star"]


def _fail(action: str, error: Exception):
    """Report ``error`` and exit with its code (1 for unexpected errors)."""
    ui_manager.print_error(f"{action}: {error}")
    code = error.exit_code if isinstance(error, SurfRegError) else 1
    raise typer.Exit(code)


def _run_config(config: Optional[Path], scene: Optional[str]) -> RunConfig:
    run = load_config(config) if config else RunConfig()
    if scene:
        run = replace(run, scene=replace(run.scene, kind=scene))
    return run


@app.callback()
def main(
    verbose: int = typer.Option(0, "--verbose", "-v", count=True, help="-v for INFO, -vv for DEBUG logging")
):
    """Surface light-field regularisation for radiance fields."""
    setup_logging(verbose)
    try:
        apply_thread_limit()
    except SurfRegError as e:
        _fail("Invalid environment", e)


@app.command("sample")
def sample(
    n_samples: int = typer.Option(32, "--n", "-n", help="Number of lattice samples (power of two)"),
    rotate_seed: Optional[int] = typer.Option(None, "--rotate-seed", help="Apply a random rotation drawn from this seed"),
    table: bool = typer.Option(False, "--table", help="Show a table instead of CSV")
):
    """Print the Fibonacci lattice and its ball partition as CSV."""
    try:
        sampler = SphereSampler(LatticeConfig(n_samples))
        sphere = sampler.sphere
        if rotate_seed is not None:
            sphere = sphere.with_rotation(random_rotation(rotation_stream(rotate_seed, 0)))
        directions, points = sphere.unit_directions, sphere.points
    except Exception as e:
        _fail("Failed to sample the sphere", e)

    rows = [
        [i, *directions[i].tolist(), float(sphere.radii[i]), *points[i].tolist()]
        for i in range(sphere.n_samples)
    ]
    if table:
        ui_manager.display_samples(rows)
        return
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(SAMPLE_HEADER)
    for row in rows:
        writer.writerow([row[0], *(repr(v) for v in row[1:])])
    typer.echo(buffer.getvalue(), nl=False)


@app.command("render")
def render(
    checkpoint: Optional[Path] = typer.Argument(None, help="Field checkpoint; omit to render the analytic scene"),
    cameras: Optional[Path] = typer.Option(None, "--cameras", help="Camera CSV"),
    scene: Optional[str] = typer.Option(None, "--scene", help="Analytic scene: plane or sphere"),
    truth: Optional[Path] = typer.Option(None, "--truth", help="Reference dataset directory for metrics"),
    output: Path = typer.Option(Path("render"), "--output", "-o", help="Output directory"),
    size: int = typer.Option(48, "--size", help="Image width and height"),
    views: int = typer.Option(8, "--views", help="Orbit views when no camera CSV is given"),
    samples: int = typer.Option(64, "--samples", help="Intervals per ray")
):
    """Render a checkpoint (with metrics against a reference) or write a ground-truth dataset."""
    try:
        cams = read_cameras(cameras) if cameras else orbit_cameras(views)
        if checkpoint is None:
            if scene is None:
                raise ConfigError("give a checkpoint or --scene")
            analytic = AnalyticScene.from_name(scene)
            gt = [render_ground_truth(analytic, cam, size, size) for cam in cams]
            write_dataset(output, gt)
            ui_manager.print_success(f"Wrote {len(gt)} {scene} views to {output}")
            return

        field = load_checkpoint(checkpoint)
        reference = None
        if truth is not None:
            reference = read_dataset(truth)
            cams = [v.camera for v in reference]
            size = reference[0].image.shape[1] if reference else size
        elif scene is not None:
            analytic = AnalyticScene.from_name(scene)
            reference = [render_ground_truth(analytic, cam, size, size) for cam in cams]

        output.mkdir(parents=True, exist_ok=True)
        rendered = []
        for cam in cams:
            view = render_view(field, cam, size, size, samples)
            rendered.append(view)
            vid = view.view_id
            write_ppm(output / f"view_{vid:03d}.ppm", view.image)
            write_f32(output / f"depth_{vid:03d}.f32", view.depth)
            write_f32(output / f"median_depth_{vid:03d}.f32", view.median_depth)
            write_f32(output / f"disparity_{vid:03d}.f32", view.disparity)
            write_f32(output / f"normal_{vid:03d}.f32", view.normal)
        write_cameras(output / "cameras.csv", cams)

        if reference is None:
            ui_manager.print_warning("No reference given; metrics.csv not written")
        else:
            rows = metrics(rendered, reference)
            write_metrics_csv(output / "metrics.csv", rows)
            ui_manager.display_metrics(rows + [summarize(rows)])
    except Exception as e:
        _fail("Failed to render", e)

    ui_manager.print_success(f"Rendered {len(rendered)} views to {output}")


@app.command("train")
def train_command(
    config: Optional[Path] = typer.Option(None, "--config", help="Config file with section.key=value lines"),
    scene: Optional[str] = typer.Option(None, "--scene", help="Analytic scene: plane or sphere"),
    no_reg: bool = typer.Option(False, "--no-reg", help="Train the unregularised control"),
    finetune_from: Optional[Path] = typer.Option(None, "--finetune", help="Finetune this checkpoint"),
    steps: int = typer.Option(500, "--steps", help="Finetuning steps"),
    no_bias_loss: bool = typer.Option(False, "--no-bias-loss", help="Drop the specular bias loss"),
    tv_target: Optional[str] = typer.Option(None, "--tv-target", help="Smooth 'specular' or composite 'color' over directions"),
    output: Path = typer.Option(Path("runs/train"), "--output", "-o", help="Run directory")
):
    """Train a grid field on an analytic scene."""
    try:
        run = _run_config(config, scene)
        train_cfg = run.train
        if no_bias_loss:
            train_cfg = replace(train_cfg, use_bias_loss=False)
        if tv_target is not None:
            train_cfg = replace(train_cfg, tv_target=tv_target)
        if no_reg:
            train_cfg = train_cfg.control()
        run = replace(run, train=train_cfg)
        output.mkdir(parents=True, exist_ok=True)
        save_config(run, output / "config.txt")

        if finetune_from is not None:
            field = load_checkpoint(finetune_from)
            data = TrainingData.from_scene_config(run.scene, field.dtype)
            with ui_manager.training_progress(steps, "Finetuning") as advance:
                reports = finetune(
                    field, train_cfg, data, steps, output,
                    regularize=train_cfg.regularize, callback=advance,
                )
        else:
            data = TrainingData.from_scene_config(run.scene, torch_dtype(train_cfg.dtype))
            total = train_cfg.schedule.total_iterations
            with ui_manager.training_progress(total) as advance:
                field, reports = train(train_cfg, data, output, callback=advance)

        if data.eval_views:
            _, rows = evaluate(field, data.eval_views, data.image_size)
            write_metrics_csv(output / "metrics.csv", rows)
            ui_manager.display_metrics(rows + [summarize(rows)], title="📊 Held-out views")
    except Exception as e:
        _fail("Training failed", e)

    reg_steps = sum(r.is_reg_step for r in reports)
    ui_manager.print_success(f"{len(reports)} iterations ({reg_steps} regularised); run written to {output}")


@app.command("eval")
def eval_command(
    checkpoint: Optional[Path] = typer.Argument(None, help="Checkpoint to score on held-out views"),
    config: Optional[Path] = typer.Option(None, "--config", help="Config file"),
    scene: Optional[str] = typer.Option(None, "--scene", help="Analytic scene: plane or sphere"),
    experiment: bool = typer.Option(False, "--experiment", help="Run the regularised vs control experiment"),
    ablation: bool = typer.Option(False, "--ablation", help="Add one run per dropped loss"),
    variants: Optional[List[str]] = typer.Option(None, "--variant", help="Schedule preset to sweep, e.g. 512-4"),
    parallel: bool = typer.Option(False, "--parallel", help="Run treatment and control concurrently"),
    output: Path = typer.Option(Path("runs/experiment"), "--output", "-o", help="Output directory"),
    json_output: bool = typer.Option(False, "--json", help="Output in JSON format")
):
    """Score a checkpoint, or run a paired experiment and write report.csv."""
    try:
        run = _run_config(config, scene)
        if experiment:
            spec = ExperimentSpec(
                output_dir=output,
                treatment=run.train,
                scene=run.scene,
                ablation=ablation,
                schedule_variants=tuple(variants or ()),
                parallel=parallel,
            )
            report = run_experiment(spec)
            if json_output:
                ui_manager.print_json({
                    "runs": {name: vars(m) for name, m in report.runs.items()},
                    "deltas": report.deltas,
                })
            else:
                ui_manager.display_report(report)
            ui_manager.print_success(f"Report written to {report.path}")
            return

        if checkpoint is None:
            raise ConfigError("give a checkpoint or --experiment")
        field = load_checkpoint(checkpoint)
        data = TrainingData.from_scene_config(run.scene, field.dtype)
        views = data.eval_views or data.train_views
        _, rows = evaluate(field, views, data.image_size)
        output.mkdir(parents=True, exist_ok=True)
        write_metrics_csv(output / "metrics.csv", rows)
        if json_output:
            ui_manager.print_json([vars(r) for r in rows])
        else:
            ui_manager.display_metrics(rows + [summarize(rows)])
    except Exception as e:
        _fail("Evaluation failed", e)


@app.command("losses")
def losses(
    checkpoint: Path = typer.Argument(..., help="Field checkpoint"),
    cameras: Optional[Path] = typer.Option(None, "--cameras", help="Camera CSV (default: orbit views)"),
    view: int = typer.Option(0, "--view", help="view_id of the camera to cast rays from"),
    pixels: Optional[List[str]] = typer.Option(None, "--pixel", help="Pixel as X,Y; repeatable"),
    stride: int = typer.Option(8, "--stride", help="Pixel stride when no --pixel is given"),
    size: int = typer.Option(48, "--size", help="Image width and height"),
    config: Optional[Path] = typer.Option(None, "--config", help="Config file for weights and lattice"),
    iteration: int = typer.Option(0, "--iteration", help="Iteration keying the sphere rotations"),
    dump_batch: Optional[Path] = typer.Option(None, "--dump-batch", help="Write the RegBatch as CSV"),
    table: bool = typer.Option(False, "--table", help="Show a table instead of CSV")
):
    """Print per-ray surface losses for camera rays."""
    try:
        run = _run_config(config, None)
        field = load_checkpoint(checkpoint)
        cams = {c.view_id: c for c in (read_cameras(cameras) if cameras else orbit_cameras(8))}
        if view not in cams:
            raise ConfigError(f"no camera with view_id {view}")
        grid = cams[view].rays(size, size, dtype=field.dtype)

        if pixels:
            coords = []
            for text in pixels:
                try:
                    x, y = (int(v) for v in text.split(","))
                except ValueError as e:
                    raise ConfigError(f"pixel must be X,Y, got '{text}'") from e
                if not (0 <= x < size and 0 <= y < size):
                    raise ConfigError(f"pixel {text} is outside the {size}x{size} image")
                coords.append((x, y))
        else:
            coords = [(x, y) for y in range(0, size, stride) for x in range(0, size, stride)]
        ray_ids = [y * size + x for x, y in coords]
        ys = torch.tensor([y for _, y in coords])
        xs = torch.tensor([x for x, _ in coords])
        ray = Ray(grid.origin[ys, xs], grid.direction[ys, xs], grid.radius_rate[ys, xs])

        with torch.no_grad():
            probe = probe_losses(field, ray, run.train, iteration)
    except Exception as e:
        _fail("Failed to compute losses", e)

    per_ray = {int(r): i for i, r in enumerate(probe.rows.tolist())}
    rows = []
    for position, ray_id in enumerate(ray_ids):
        values = {"ray_id": ray_id, "L_d": 0.0, "L_n": 0.0, "L_b": 0.0, "L_s": 0.0, "w_star": 0.0}
        if position in per_ray and probe.losses is not None:
            k = per_ray[position]
            for name in ("L_d", "L_n", "L_b", "L_s"):
                values[name] = float(probe.losses.per_ray[name][k])
            values["w_star"] = float(probe.w_star[k])
        rows.append(values)

    if dump_batch is not None and probe.batch is not None:
        written = write_reg_batch(dump_batch, [ray_ids[int(r)] for r in probe.rows], probe.batch)
        ui_manager.print_info(f"Wrote {written} batch rows to {dump_batch}")

    if table:
        ui_manager.display_losses(rows)
        return
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(LOSSES_HEADER)
    for row in rows:
        writer.writerow([row["ray_id"], *(repr(row[k]) for k in LOSSES_HEADER[1:])])
    typer.echo(buffer.getvalue(), nl=False)


@app.command("schedule")
def schedule(
    preset: Optional[str] = typer.Option(None, "--preset", help="1024-8, 512-4, 256-2 or 128-1"),
    initial: int = typer.Option(512, "--initial", help="Initial period"),
    final: int = typer.Option(4, "--final", help="Final period"),
    total: int = typer.Option(25000, "--total", help="Total iterations"),
    extra_cost: float = typer.Option(1.0, "--extra-cost", help="Extra cost of a regularised step in plain steps"),
    json_output: bool = typer.Option(False, "--json", help="Output in JSON format")
):
    """Preview the staircase regularisation schedule."""
    try:
        if preset:
            curriculum = CurriculumSchedule.preset(preset, total)
        else:
            curriculum = CurriculumSchedule(initial, final, total)
        rows = schedule_preview(curriculum, extra_cost)
    except Exception as e:
        _fail("Invalid schedule", e)

    if json_output:
        ui_manager.print_json(rows)
    else:
        ui_manager.display_schedule_preview(rows, curriculum.total_iterations)


if __name__ == "__main__":
    app()
