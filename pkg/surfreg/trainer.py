"""Desk-scale training loop with scheduled surface regularisation."""

import csv
import json
import logging
import math
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, List, Optional, Tuple

import torch

from .config import SceneConfig, TrainConfig
from .errors import ConfigError, NumericError
from .field import GridField
from .geometry import Ray
from .io import save_checkpoint
from .regularizers import RegBatch, RegLosses, SurfaceCandidate, build_reg_batch, total_regularization
from .renderer import render_ray, sample_rays, select_surface
from .scene import AnalyticScene, GroundTruthView, orbit_cameras, render_ground_truth
from .schedule import CurriculumSchedule, is_reg_step
from .sphere import SphereSampler

logger = logging.getLogger(__name__)

TRAIN_LOG_HEADER = ["iter", "photometric", "L_d", "L_n", "L_b", "L_s", "is_reg_step"]
THREADS_ENV = "SURFREG_THREADS"
_TORCH_DTYPES = {"float32": torch.float32, "float64": torch.float64}


def apply_thread_limit() -> Optional[int]:
    """Cap torch intra-op threads from ``SURFREG_THREADS`` if it is set."""
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return None
    try:
        threads = int(raw)
    except ValueError as e:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got '{raw}'") from e
    if threads < 1:
        raise ConfigError(f"{THREADS_ENV} must be positive")
    torch.set_num_threads(threads)
    return threads


def torch_dtype(name: str) -> torch.dtype:
    return _TORCH_DTYPES[name]


def build_field(config: TrainConfig) -> GridField:
    """Fresh grid field sized and seeded from the config."""
    return GridField(
        grid_resolution=config.grid_resolution,
        color_resolution=config.color_resolution,
        feature_dim=config.feature_dim,
        hidden_dim=config.hidden_dim,
        dtype=torch_dtype(config.dtype),
        seed=config.seed,
    )


@dataclass
class TrainingData:
    """Ground-truth views of an analytic scene, flattened to rays and target colours."""

    scene: AnalyticScene
    train_views: List[GroundTruthView]
    eval_views: List[GroundTruthView]
    image_size: int
    origins: torch.Tensor
    directions: torch.Tensor
    radius_rates: torch.Tensor
    colors: torch.Tensor

    @classmethod
    def from_views(
        cls,
        scene: AnalyticScene,
        train_views: List[GroundTruthView],
        eval_views: List[GroundTruthView],
        image_size: int,
        dtype: torch.dtype = torch.float32,
    ) -> "TrainingData":
        origins, directions, rates, colors = [], [], [], []
        for view in train_views:
            rays = view.camera.rays(image_size, image_size, dtype=torch.float64)
            origins.append(rays.origin.reshape(-1, 3))
            directions.append(rays.direction.reshape(-1, 3))
            rates.append(rays.radius_rate.reshape(-1))
            colors.append(torch.from_numpy(view.image).reshape(-1, 3))
        return cls(
            scene=scene,
            train_views=train_views,
            eval_views=eval_views,
            image_size=image_size,
            origins=torch.cat(origins).to(dtype),
            directions=torch.cat(directions).to(dtype),
            radius_rates=torch.cat(rates).to(dtype),
            colors=torch.cat(colors).to(dtype),
        )

    @classmethod
    def from_scene_config(cls, config: SceneConfig, dtype: torch.dtype = torch.float32) -> "TrainingData":
        """Render training views and held-out views interleaved on the same orbit."""
        scene = AnalyticScene.from_name(config.kind)
        size = config.image_size
        train_cams = orbit_cameras(config.views)
        eval_cams = orbit_cameras(config.eval_views, phase=0.5, first_id=config.views) if config.eval_views else []
        train = [render_ground_truth(scene, cam, size, size) for cam in train_cams]
        held_out = [render_ground_truth(scene, cam, size, size) for cam in eval_cams]
        logger.info("rendered %d training and %d held-out views of the %s scene", len(train), len(held_out), config.kind)
        return cls.from_views(scene, train, held_out, size, dtype)

    @property
    def n_rays(self) -> int:
        return self.origins.shape[0]

    def rays(self, ray_ids: torch.Tensor) -> Ray:
        return Ray(self.origins[ray_ids], self.directions[ray_ids], self.radius_rates[ray_ids])


@dataclass
class LossReport:
    """Loss values of one iteration."""

    iteration: int
    photometric: float
    L_d: float = 0.0
    L_n: float = 0.0
    L_b: float = 0.0
    L_s: float = 0.0
    is_reg_step: bool = False
    n_candidates: int = 0

    @property
    def total(self) -> float:
        return self.photometric + self.L_d + self.L_n + self.L_b + self.L_s

    def row(self) -> list:
        return [
            self.iteration,
            repr(self.photometric),
            repr(self.L_d),
            repr(self.L_n),
            repr(self.L_b),
            repr(self.L_s),
            int(self.is_reg_step),
        ]


def _zero_losses(like: torch.Tensor) -> RegLosses:
    zero = torch.zeros((), dtype=like.dtype)
    return RegLosses(L_d=zero, L_n=zero, L_b=zero, L_s=zero, per_ray={})


def cosine_factor(iteration: int, total: int, lr: float, lr_final: float) -> float:
    """Multiplier on ``lr`` decaying from 1 to ``lr_final / lr`` over ``total`` iterations."""
    if lr == 0:
        return 0.0
    progress = min(iteration / max(total, 1), 1.0)
    target = lr_final + 0.5 * (lr - lr_final) * (1 + math.cos(math.pi * progress))
    return target / lr


def regularize_rows(
    field,
    sampler: SphereSampler,
    iteration: int,
    ray: Ray,
    cand: SurfaceCandidate,
    rows: torch.Tensor,
    config: TrainConfig,
    ray_count: int,
    denominator: Optional[torch.Tensor] = None,
) -> Tuple[RegLosses, RegBatch]:
    """Build the regularisation batch for the selected rows and score it.

    Row ``r`` of the ray batch uses the ``r``-th rotation of the iteration's
    stream, whichever rows are selected.
    """
    directions, points = sampler.rotated(iteration, ray.direction.shape[0])
    picked = rows.numpy()
    dtype = cand.x_star.dtype
    sphere = (
        torch.as_tensor(directions[picked], dtype=dtype),
        torch.as_tensor(points[picked], dtype=dtype),
    )
    sub = cand.subset(rows)
    sub_ray = Ray(ray.origin[rows], ray.direction[rows], ray.radius_rate[rows])
    batch = build_reg_batch(field, sub, sphere, sub_ray)
    losses = total_regularization(
        sub, batch, config.weights, config.regularizer_settings, ray_count=ray_count, denominator=denominator
    )
    return losses, batch


@dataclass
class LossProbe:
    """Surface losses of a fixed set of rays."""

    rows: torch.Tensor
    w_star: torch.Tensor
    losses: Optional[RegLosses]
    batch: Optional[RegBatch]


def probe_losses(field, ray: Ray, config: TrainConfig, iteration: int = 0) -> LossProbe:
    """Per-ray surface losses of ``ray`` without stratification or an update.

    Only rays with a usable candidate appear in ``rows``; the batch averages
    are taken over those rays.
    """
    samples, hit = sample_rays(field, ray, config.samples_per_ray)
    result = render_ray(samples)
    cand = select_surface(samples, result)
    rows = torch.nonzero(cand.usable & hit).squeeze(-1)
    if rows.numel() == 0:
        return LossProbe(rows, cand.w_star[rows], None, None)
    losses, batch = regularize_rows(
        field, SphereSampler(config.lattice), iteration, ray, cand, rows, config, int(rows.numel())
    )
    return LossProbe(rows, cand.w_star[rows].detach(), losses, batch)


class CurriculumTrainer:
    """Adam on photometric MSE, plus the surface losses on scheduled iterations."""

    def __init__(
        self,
        field: GridField,
        config: TrainConfig,
        data: TrainingData,
        output_dir: Optional[Path] = None,
    ):
        self.field = field
        self.config = config
        self.data = data
        self.output_dir = Path(output_dir) if output_dir is not None else None
        self.sampler = SphereSampler(config.lattice)
        self.generator = torch.Generator().manual_seed(config.seed)

        self.optimizer = torch.optim.Adam(
            field.parameters(), lr=config.learning_rate, betas=(0.9, 0.999), eps=1e-8
        )
        total = config.schedule.total_iterations
        if config.lr_schedule == "cosine":
            factor = lambda it: cosine_factor(it, total, config.learning_rate, config.lr_final)  # noqa: E731
        else:
            factor = lambda it: 1.0  # noqa: E731
        self.scheduler = torch.optim.lr_scheduler.LambdaLR(self.optimizer, factor)

    @property
    def schedule(self) -> CurriculumSchedule:
        return self.config.schedule

    def regularizes(self, iteration: int) -> bool:
        return self.config.regularize and is_reg_step(self.schedule, iteration)

    def sample_batch(self) -> torch.Tensor:
        return torch.randint(self.data.n_rays, (self.config.batch_size,), generator=self.generator)

    def regularization(
        self,
        iteration: int,
        ray: Ray,
        samples,
        result,
        hit: torch.Tensor,
        denominator: Optional[torch.Tensor] = None,
    ) -> Tuple[RegLosses, torch.Tensor]:
        """Surface losses of the rays with a usable candidate, averaged over the batch.

        Returns the losses and the batch positions of the regularised rays.
        """
        n_rays = hit.shape[0]
        cand = select_surface(samples, result)
        rows = torch.nonzero(cand.usable & hit).squeeze(-1)
        if self.config.reg_fraction < 1.0 and rows.numel():
            keep = max(1, math.ceil(self.config.reg_fraction * rows.numel()))
            chosen = torch.randperm(rows.numel(), generator=self.generator)[:keep]
            rows = rows[torch.sort(chosen).values]
        if rows.numel() == 0:
            return _zero_losses(result.weights), rows

        losses, _ = regularize_rows(
            self.field, self.sampler, iteration, ray, cand, rows, self.config, n_rays, denominator
        )
        return losses, rows

    def compute_loss(
        self,
        iteration: int,
        ray_ids: torch.Tensor,
        stratified: bool = True,
        denominator: Optional[torch.Tensor] = None,
    ) -> Tuple[torch.Tensor, LossReport]:
        """Photometric MSE plus, on regularised iterations, the four surface losses."""
        ray = self.data.rays(ray_ids)
        samples, hit = sample_rays(
            self.field, ray, self.config.samples_per_ray, stratified=stratified, generator=self.generator
        )
        result = render_ray(samples)
        photometric = ((result.color - self.data.colors[ray_ids]) ** 2).mean()

        total = photometric
        report = LossReport(iteration=iteration, photometric=photometric.detach().item())
        if self.regularizes(iteration):
            losses, rows = self.regularization(iteration, ray, samples, result, hit, denominator)
            total = total + losses.total
            report.is_reg_step = True
            report.n_candidates = int(rows.numel())
            report.L_d, report.L_n, report.L_b, report.L_s = (
                value.detach().item() for value in (losses.L_d, losses.L_n, losses.L_b, losses.L_s)
            )
        return total, report

    def _numeric_failure(self, iteration: int, ray_ids: torch.Tensor, report: LossReport):
        diagnostics = {
            "iteration": iteration,
            "ray_ids": ray_ids.tolist(),
            "losses": {
                "photometric": report.photometric,
                "L_d": report.L_d,
                "L_n": report.L_n,
                "L_b": report.L_b,
                "L_s": report.L_s,
            },
        }
        if self.output_dir is not None:
            self.output_dir.mkdir(parents=True, exist_ok=True)
            path = self.output_dir / "numeric_failure.json"
            path.write_text(json.dumps(diagnostics, indent=2, default=str))
            logger.error("wrote diagnostics to %s", path)
        raise NumericError(f"non-finite loss at iteration {iteration}", diagnostics)

    def train_step(self, iteration: int) -> LossReport:
        """One optimiser update on a freshly drawn ray batch."""
        ray_ids = self.sample_batch()
        self.optimizer.zero_grad(set_to_none=True)
        total, report = self.compute_loss(iteration, ray_ids)
        if not torch.isfinite(total):
            self._numeric_failure(iteration, ray_ids, report)
        total.backward()
        self.optimizer.step()
        self.scheduler.step()
        return report

    def fit(
        self,
        iterations: Optional[int] = None,
        callback: Optional[Callable[[LossReport], None]] = None,
    ) -> List[LossReport]:
        """Run the loop, writing ``train_log.csv`` and checkpoints when an output dir is set."""
        iterations = self.schedule.total_iterations if iterations is None else iterations
        reports: List[LossReport] = []
        log_file = writer = None
        if self.output_dir is not None:
            self.output_dir.mkdir(parents=True, exist_ok=True)
            log_file = open(self.output_dir / "train_log.csv", "w", newline="")
            writer = csv.writer(log_file)
            writer.writerow(TRAIN_LOG_HEADER)

        try:
            for iteration in range(iterations):
                report = self.train_step(iteration)
                reports.append(report)
                if writer is not None:
                    writer.writerow(report.row())
                if self.config.log_every and iteration % self.config.log_every == 0:
                    logger.info(
                        "iter %d photometric %.6f L_d %.3e L_n %.3e L_b %.3e L_s %.3e%s",
                        iteration, report.photometric, report.L_d, report.L_n, report.L_b, report.L_s,
                        " [reg]" if report.is_reg_step else "",
                    )
                if (
                    self.output_dir is not None
                    and self.config.checkpoint_every
                    and (iteration + 1) % self.config.checkpoint_every == 0
                ):
                    save_checkpoint(self.field, self.output_dir / f"checkpoint_{iteration + 1:06d}.srf")
                if callback is not None:
                    callback(report)
        finally:
            if log_file is not None:
                log_file.close()

        if self.output_dir is not None:
            save_checkpoint(self.field, self.output_dir / "field.srf")
        return reports


def train(
    config: TrainConfig,
    data: TrainingData,
    output_dir: Optional[Path] = None,
    field: Optional[GridField] = None,
    callback: Optional[Callable[[LossReport], None]] = None,
) -> Tuple[GridField, List[LossReport]]:
    """Train a field from scratch (or continue ``field``) under ``config``."""
    torch.manual_seed(config.seed)
    field = field if field is not None else build_field(config)
    trainer = CurriculumTrainer(field, config, data, output_dir)
    return field, trainer.fit(callback=callback)


def finetune_config(
    config: TrainConfig,
    steps: int,
    use_bias_loss: Optional[bool] = None,
    regularize: bool = True,
    tv_target: Optional[str] = None,
) -> TrainConfig:
    """Fixed-rate config regularising every ``final_period`` iterations for ``steps`` steps."""
    tuned = config.for_finetuning(use_bias_loss, tv_target)
    schedule = CurriculumSchedule.constant(config.schedule.final_period, max(steps, 1))
    return replace(tuned, schedule=schedule, regularize=regularize)


def finetune(
    field: GridField,
    config: TrainConfig,
    data: TrainingData,
    steps: int,
    output_dir: Optional[Path] = None,
    use_bias_loss: Optional[bool] = None,
    regularize: bool = True,
    callback: Optional[Callable[[LossReport], None]] = None,
    tv_target: Optional[str] = None,
) -> List[LossReport]:
    """Continue training a pretrained field.

    ``regularize=False`` gives the naive-continuation control with the same
    step count and learning rate. ``tv_target="color"`` smooths the composite
    colour over directions instead of the specular colour alone.
    """
    tuned = finetune_config(config, steps, use_bias_loss, regularize, tv_target)
    trainer = CurriculumTrainer(field, tuned, data, output_dir)
    return trainer.fit(steps, callback=callback)
