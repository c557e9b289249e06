"""Image, normal and disparity error metrics against ground truth."""

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Sequence

import numpy as np

from .errors import DimensionError
from .renderer import BACKGROUND_ACCUMULATION, RenderedView
from .scene import GroundTruthView

METRICS_HEADER = ["view_id", "psnr_db", "normal_mae_deg", "disparity_rmse", "coverage", "background_threshold"]


@dataclass
class ViewMetrics:
    """Scores of one view, or of a summary when ``view_id`` is -1.

    Geometry errors are ``nan`` when no pixel is foreground. ``coverage`` is
    the share of reference foreground pixels that the render accumulates to at
    least ``background_threshold``.
    """

    view_id: int
    psnr_db: float
    normal_mae_deg: float
    disparity_rmse: float
    normal_median_mae_deg: float = 0.0
    coverage: float = 1.0
    background_threshold: float = BACKGROUND_ACCUMULATION

    def row(self):
        return [
            self.view_id,
            _fmt(self.psnr_db),
            _fmt(self.normal_mae_deg),
            _fmt(self.disparity_rmse),
            _fmt(self.coverage),
            _fmt(self.background_threshold),
        ]


def _fmt(value: float) -> str:
    if math.isinf(value):
        return "inf"
    if math.isnan(value):
        return "nan"
    return f"{value:.6f}"


def _finite_mean(values: Iterable[float]) -> float:
    kept = [v for v in values if not math.isnan(v)]
    return math.fsum(kept) / len(kept) if kept else math.nan


def psnr(rendered: np.ndarray, truth: np.ndarray) -> float:
    """PSNR in dB of images in [0, 1]; identical images give +inf."""
    rendered = np.asarray(rendered, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if rendered.shape != truth.shape:
        raise DimensionError(f"image shapes differ: {rendered.shape} vs {truth.shape}")
    mse = float(np.mean((rendered - truth) ** 2))
    if mse == 0.0:
        return math.inf
    return -10.0 * math.log10(mse)


def angular_errors(normals: np.ndarray, truth: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Per-pixel angle in degrees between normals over the masked pixels."""
    if normals.shape != truth.shape:
        raise DimensionError(f"normal map shapes differ: {normals.shape} vs {truth.shape}")
    cosine = np.clip(np.sum(normals * truth, axis=-1), -1.0, 1.0)
    return np.degrees(np.arccos(cosine[mask]))


def normal_mae(normals: np.ndarray, truth: np.ndarray, mask: np.ndarray) -> float:
    """Mean angular error; ``nan`` on an empty mask."""
    errors = angular_errors(normals, truth, mask)
    return float(np.mean(errors)) if errors.size else math.nan


def disparity_rmse(disparity: np.ndarray, truth_depth: np.ndarray, mask: np.ndarray) -> float:
    """RMSE between rendered disparity and ``1 / depth`` over the mask; ``nan`` when it is empty."""
    if disparity.shape != truth_depth.shape:
        raise DimensionError(f"disparity shapes differ: {disparity.shape} vs {truth_depth.shape}")
    if not mask.any():
        return math.nan
    truth_disparity = 1.0 / truth_depth[mask]
    return float(np.sqrt(np.mean((disparity[mask] - truth_disparity) ** 2)))


def foreground(rendered: RenderedView, truth: GroundTruthView) -> np.ndarray:
    """Pixels that are foreground in truth and accumulate at least the background threshold."""
    return np.asarray(truth.mask, dtype=bool) & (rendered.accumulation >= BACKGROUND_ACCUMULATION)


def view_metrics(rendered: RenderedView, truth: GroundTruthView) -> ViewMetrics:
    if rendered.image.shape != truth.image.shape:
        raise DimensionError(f"view {rendered.view_id}: {rendered.image.shape} vs {truth.image.shape}")
    mask = foreground(rendered, truth)
    reference = int(np.count_nonzero(truth.mask))
    errors = angular_errors(rendered.normal, truth.normal, mask)
    return ViewMetrics(
        view_id=rendered.view_id,
        psnr_db=psnr(rendered.image, truth.image),
        normal_mae_deg=float(np.mean(errors)) if errors.size else math.nan,
        disparity_rmse=disparity_rmse(rendered.disparity, truth.depth, mask),
        normal_median_mae_deg=float(np.median(errors)) if errors.size else math.nan,
        coverage=int(np.count_nonzero(mask)) / reference if reference else 0.0,
    )


def metrics(rendered: Sequence[RenderedView], truth: Sequence[GroundTruthView]) -> List[ViewMetrics]:
    """Per-view PSNR, normal MAE and disparity RMSE."""
    if len(rendered) != len(truth):
        raise DimensionError(f"{len(rendered)} rendered views for {len(truth)} reference views")
    return [view_metrics(r, t) for r, t in zip(rendered, truth)]


def summarize(rows: Sequence[ViewMetrics]) -> ViewMetrics:
    """Mean over views, with PSNR averaged through the mean squared error.

    Geometry errors average only the views that had foreground, and are ``nan``
    when none did. PSNR and coverage average every view.
    """
    if not rows:
        return ViewMetrics(-1, math.inf, math.nan, math.nan, math.nan, coverage=0.0)
    mses = [10.0 ** (-r.psnr_db / 10.0) if not math.isinf(r.psnr_db) else 0.0 for r in rows]
    mean_mse = math.fsum(mses) / len(mses)
    return ViewMetrics(
        view_id=-1,
        psnr_db=math.inf if mean_mse == 0 else -10.0 * math.log10(mean_mse),
        normal_mae_deg=_finite_mean(r.normal_mae_deg for r in rows),
        disparity_rmse=_finite_mean(r.disparity_rmse for r in rows),
        normal_median_mae_deg=_finite_mean(r.normal_median_mae_deg for r in rows),
        coverage=math.fsum(r.coverage for r in rows) / len(rows),
        background_threshold=rows[0].background_threshold,
    )


def write_metrics_csv(path, rows: Sequence[ViewMetrics]):
    """``metrics.csv`` with one row per view."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(METRICS_HEADER)
        for row in rows:
            writer.writerow(row.row())
