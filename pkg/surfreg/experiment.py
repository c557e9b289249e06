"""Paired treatment/control experiments, ablations and their report."""

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .cache import RunCache
from .config import RunConfig, SceneConfig, TrainConfig
from .errors import ConfigError, FormatError
from .field import GridField
from .io import load_checkpoint, write_ppm
from .metrics import ViewMetrics, metrics, summarize
from .renderer import BACKGROUND_ACCUMULATION, RenderedView, render_view
from .scene import GroundTruthView
from .schedule import CurriculumSchedule
from .trainer import TrainingData, apply_thread_limit, torch_dtype, train

logger = logging.getLogger(__name__)

REPORT_HEADER = [
    "run",
    "psnr_db",
    "normal_mae_deg",
    "normal_median_mae_deg",
    "disparity_rmse",
    "coverage",
    "background_threshold",
]
ABLATED_LOSSES = ("lambda_d", "lambda_n", "lambda_b", "lambda_s")


@dataclass
class ExperimentSpec:
    """A scene, the treatment and control configs and where to write results."""

    output_dir: Path
    treatment: TrainConfig = field(default_factory=TrainConfig)
    control: Optional[TrainConfig] = None
    scene: SceneConfig = field(default_factory=SceneConfig)
    ablation: bool = False
    schedule_variants: Sequence[str] = ()
    parallel: bool = False
    eval_intervals: int = 64

    def __post_init__(self):
        self.output_dir = Path(self.output_dir)
        if self.control is None:
            self.control = self.treatment.control()
        neutral = dict(regularize=True, weights=self.treatment.weights, schedule=self.treatment.schedule)
        if replace(self.control, **neutral) != replace(self.treatment, **neutral):
            raise ConfigError("treatment and control may differ only in regularisation settings")


@dataclass
class RunResult:
    name: str
    summary: ViewMetrics
    views: List[ViewMetrics]
    rendered: List[RenderedView] = field(default_factory=list)


@dataclass
class Report:
    """Per-run summaries, paired deltas and the optional ablation grid."""

    runs: Dict[str, ViewMetrics]
    deltas: Dict[str, float]
    ablation: List[Tuple[str, ViewMetrics]] = field(default_factory=list)
    variants: List[Tuple[str, ViewMetrics]] = field(default_factory=list)
    path: Optional[Path] = None


def _fmt(value: float) -> str:
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    if math.isnan(value):
        return "nan"
    return f"{value:.6f}"


def _delta(treated: float, control: float) -> float:
    if treated == control or (math.isnan(treated) and math.isnan(control)):
        return 0.0
    return treated - control


def paired_deltas(treatment: ViewMetrics, control: ViewMetrics) -> Dict[str, float]:
    """Treatment minus control; negative normal and disparity deltas favour treatment."""
    return {
        "normal_mae_deg": _delta(treatment.normal_mae_deg, control.normal_mae_deg),
        "disparity_rmse": _delta(treatment.disparity_rmse, control.disparity_rmse),
        "psnr_db": _delta(treatment.psnr_db, control.psnr_db),
    }


def evaluate(
    field: GridField,
    views: Sequence[GroundTruthView],
    image_size: int,
    n_intervals: int = 64,
) -> Tuple[List[RenderedView], List[ViewMetrics]]:
    """Render each reference view and score it."""
    rendered = [render_view(field, v.camera, image_size, image_size, n_intervals) for v in views]
    return rendered, metrics(rendered, list(views))


def depth_image(depth: np.ndarray, accumulation: np.ndarray, far: Optional[float] = None) -> np.ndarray:
    """Grey (H, W, 3) depth visualisation, near is bright and background black."""
    fg = accumulation >= BACKGROUND_ACCUMULATION
    far = far if far is not None else (float(depth[fg].max()) if fg.any() else 1.0)
    grey = np.where(fg, 1.0 - np.clip(depth / max(far, 1e-12), 0.0, 1.0), 0.0)
    return np.repeat(grey[..., None], 3, axis=-1)


def comparison_strip(view: RenderedView) -> np.ndarray:
    """rendered | diffuse | specular | depth, side by side."""
    panels = [view.image, view.diffuse, view.specular, depth_image(view.depth, view.accumulation)]
    return np.concatenate([np.clip(p, 0.0, 1.0) for p in panels], axis=1)


class ExperimentRunner:
    """Trains, evaluates and caches every run an ExperimentSpec asks for."""

    def __init__(self, spec: ExperimentSpec, data: Optional[TrainingData] = None):
        self.spec = spec
        self.data = data
        self.cache = RunCache(spec.output_dir)

    def _data(self, config: TrainConfig) -> TrainingData:
        if self.data is None:
            self.data = TrainingData.from_scene_config(self.spec.scene, torch_dtype(config.dtype))
        return self.data

    def _plan(self) -> List[Tuple[str, TrainConfig]]:
        spec = self.spec
        plan = [("treatment", spec.treatment), ("control", spec.control)]
        if spec.ablation:
            for name in ABLATED_LOSSES:
                ablated = replace(spec.treatment, weights=spec.treatment.weights.without(name))
                plan.append((f"no_L_{name[-1]}", ablated))
        total = spec.treatment.schedule.total_iterations
        for preset in spec.schedule_variants:
            schedule = CurriculumSchedule.preset(preset, total)
            plan.append((f"schedule_{preset}", replace(spec.treatment, schedule=schedule)))
        return plan

    def run_one(self, name: str, config: TrainConfig, keep_renders: bool = False) -> RunResult:
        data = self._data(config)
        run_dir = self.spec.output_dir / name
        digest = RunConfig(train=config, scene=self.spec.scene).digest()
        cached = self.cache.get_run(digest, name)
        checkpoint = run_dir / "field.srf"

        fitted = None
        if cached is not None and checkpoint.exists():
            try:
                fitted = load_checkpoint(checkpoint)
                logger.info("reusing finished run %s (%s)", name, digest)
            except FormatError:
                logger.warning("checkpoint of cached run %s is unreadable, retraining", name)
        if fitted is None:
            logger.info("training run %s", name)
            fitted, _ = train(config, data, run_dir)

        rendered, rows = evaluate(fitted, data.eval_views, data.image_size, self.spec.eval_intervals)
        summary = summarize(rows)
        self.cache.store_run(digest, name, _summary_dict(summary))
        return RunResult(name, summary, rows, rendered if keep_renders else [])

    def run(self) -> Report:
        apply_thread_limit()
        spec = self.spec
        spec.output_dir.mkdir(parents=True, exist_ok=True)
        plan = self._plan()
        results: Dict[str, RunResult] = {}

        try:
            if spec.parallel:
                self._data(spec.treatment)
                with ThreadPoolExecutor(max_workers=2) as pool:
                    futures = {
                        name: pool.submit(self.run_one, name, cfg, name in ("treatment", "control"))
                        for name, cfg in plan[:2]
                    }
                    for name, future in futures.items():
                        results[name] = future.result()
                rest = plan[2:]
            else:
                rest = plan
            for name, cfg in rest:
                if name not in results:
                    results[name] = self.run_one(name, cfg, name in ("treatment", "control"))
        finally:
            report = self._report(plan, results)

        self._write_strips(results)
        return report

    def _report(self, plan, results: Dict[str, RunResult]) -> Report:
        runs = {name: results[name].summary for name, _ in plan if name in results}
        deltas: Dict[str, float] = {}
        if "treatment" in runs and "control" in runs:
            deltas = paired_deltas(runs["treatment"], runs["control"])

        ablation = []
        if self.spec.ablation and "treatment" in runs:
            ablation.append(("full", runs["treatment"]))
            ablation.extend((name, runs[name]) for name, _ in plan if name.startswith("no_L_") and name in runs)
        variants = [(name, runs[name]) for name, _ in plan if name.startswith("schedule_") and name in runs]

        path = self.spec.output_dir / "report.csv"
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(REPORT_HEADER)
            for name, summary in runs.items():
                writer.writerow([
                    name,
                    _fmt(summary.psnr_db),
                    _fmt(summary.normal_mae_deg),
                    _fmt(summary.normal_median_mae_deg),
                    _fmt(summary.disparity_rmse),
                    _fmt(summary.coverage),
                    _fmt(summary.background_threshold),
                ])
            if deltas:
                writer.writerow([
                    "delta",
                    _fmt(deltas["psnr_db"]),
                    _fmt(deltas["normal_mae_deg"]),
                    "",
                    _fmt(deltas["disparity_rmse"]),
                    "",
                    "",
                ])
        return Report(runs=runs, deltas=deltas, ablation=ablation, variants=variants, path=path)

    def _write_strips(self, results: Dict[str, RunResult]):
        for name in ("treatment", "control"):
            if name not in results:
                continue
            for view in results[name].rendered:
                write_ppm(self.spec.output_dir / "strips" / f"{name}_{view.view_id:03d}.ppm", comparison_strip(view))


def _summary_dict(summary: ViewMetrics) -> Dict[str, float]:
    return {
        "psnr_db": summary.psnr_db,
        "normal_mae_deg": summary.normal_mae_deg,
        "normal_median_mae_deg": summary.normal_median_mae_deg,
        "disparity_rmse": summary.disparity_rmse,
        "coverage": summary.coverage,
        "background_threshold": summary.background_threshold,
    }


def run_experiment(spec: ExperimentSpec, data: Optional[TrainingData] = None) -> Report:
    """Run treatment and control with shared seeds and write ``report.csv`` plus comparison strips."""
    return ExperimentRunner(spec, data).run()
