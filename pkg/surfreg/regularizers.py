"""Regularisation batches at surface candidates and the four surface losses.

Every loss returns one value per ray; ``total_regularization`` applies the
validity mask and averages over the ray count.
"""

import math
from dataclasses import dataclass, fields, replace
from typing import Optional, Tuple, Union

import numpy as np
import torch

from .errors import ConfigError, GeometryError
from .geometry import Ray, VirtualRayBatch, build_virtual_rays
from .sphere import SampleSphere

HALF_MAX_SCALE = math.sqrt(2.0 * math.log(2.0))
BIAS_GUARD = 1e-8
COINCIDENT = 1e-12
BIAS_DENOMINATORS = ("channel_max", "sample_norm")
TV_TARGETS = ("specular", "color")

SphereLike = Union[SampleSphere, Tuple[torch.Tensor, torch.Tensor]]


@dataclass
class SurfaceCandidate:
    """First-surface sample of each ray: position, normal, weight and Gaussian."""

    x_star: torch.Tensor
    n_star: torch.Tensor
    w_star: torch.Tensor
    cov_star: torch.Tensor
    sigma_r_star: torch.Tensor
    index: Optional[torch.Tensor] = None
    valid: Optional[torch.Tensor] = None
    degenerate: Optional[torch.Tensor] = None

    def subset(self, mask: torch.Tensor) -> "SurfaceCandidate":
        """Candidates of the rays selected by ``mask``."""
        values = {}
        for f in fields(self):
            value = getattr(self, f.name)
            values[f.name] = value[mask] if value is not None else None
        return SurfaceCandidate(**values)

    @property
    def usable(self) -> torch.Tensor:
        """Valid candidates whose own normal is defined."""
        usable = torch.ones_like(self.w_star, dtype=torch.bool)
        if self.valid is not None:
            usable = usable & self.valid
        if self.degenerate is not None:
            usable = usable & ~self.degenerate
        return usable


@dataclass
class LossWeights:
    """Scales of the density, normal, specular-bias and sphere-TV losses."""

    lambda_d: float = 0.1
    lambda_n: float = 0.1
    lambda_b: float = 0.03
    lambda_s: float = 0.001

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"{f.name} must be non-negative")

    def without(self, name: str) -> "LossWeights":
        """Copy with one loss switched off, e.g. ``without('lambda_b')``."""
        return replace(self, **{name: 0.0})

    def scaled(self, factor: float) -> "LossWeights":
        return LossWeights(*(getattr(self, f.name) * factor for f in fields(self)))


@dataclass
class RegularizerSettings:
    """Knobs of the loss definitions that are not loss weights."""

    knn_k: int = 3
    bias_denominator: str = "channel_max"
    use_bias_loss: bool = True
    tv_target: str = "specular"

    def __post_init__(self):
        if self.bias_denominator not in BIAS_DENOMINATORS:
            raise ConfigError(
                f"bias_denominator must be one of {BIAS_DENOMINATORS}, got '{self.bias_denominator}'"
            )
        if self.knn_k < 1:
            raise ConfigError("knn_k must be at least 1")
        if self.tv_target not in TV_TARGETS:
            raise ConfigError(f"tv_target must be one of {TV_TARGETS}, got '{self.tv_target}'")


@dataclass
class RegBatch:
    """Spatial and directional samples around each candidate, with field outputs."""

    x_m: torch.Tensor
    d_m: torch.Tensor
    x_phi: torch.Tensor
    d_phi: torch.Tensor
    tau: Optional[torch.Tensor] = None
    normals: Optional[torch.Tensor] = None
    degenerate: Optional[torch.Tensor] = None
    c_s: Optional[torch.Tensor] = None
    color: Optional[torch.Tensor] = None
    virtual: Optional[VirtualRayBatch] = None


@dataclass
class RegLosses:
    """Batch-averaged losses plus the per-ray terms they came from."""

    L_d: torch.Tensor
    L_n: torch.Tensor
    L_b: torch.Tensor
    L_s: torch.Tensor
    per_ray: dict
    bias_denominator: Optional[torch.Tensor] = None

    @property
    def total(self) -> torch.Tensor:
        return self.L_d + self.L_n + self.L_b + self.L_s

    def as_dict(self):
        return {
            "L_d": self.L_d.detach().item(),
            "L_n": self.L_n.detach().item(),
            "L_b": self.L_b.detach().item(),
            "L_s": self.L_s.detach().item(),
        }


def _sphere_tensors(sphere: SphereLike, like: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    if isinstance(sphere, SampleSphere):
        directions = torch.as_tensor(sphere.unit_directions, dtype=like.dtype)
        points = torch.as_tensor(sphere.points, dtype=like.dtype)
        return directions, points
    directions, points = sphere
    if isinstance(directions, np.ndarray):
        directions = torch.as_tensor(directions, dtype=like.dtype)
    if isinstance(points, np.ndarray):
        points = torch.as_tensor(points, dtype=like.dtype)
    return directions.to(like.dtype), points.to(like.dtype)


def build_directional_batch(cand: SurfaceCandidate, sphere: SphereLike) -> Tuple[torch.Tensor, torch.Tensor]:
    """All directions at x_star, each flipped into the hemisphere of n_star.

    Directions exactly tangent to n_star keep their sign.
    """
    directions, _ = _sphere_tensors(sphere, cand.x_star)
    dot = (directions * cand.n_star.detach()[..., None, :]).sum(-1)
    sign = torch.where(dot >= 0, torch.ones_like(dot), -torch.ones_like(dot))
    return cand.x_star, directions * sign[..., None]


def build_spatial_batch(cand: SurfaceCandidate, sphere: SphereLike) -> Tuple[torch.Tensor, torch.Tensor]:
    """Ball points scaled to the half-maximum radius of the candidate's footprint."""
    directions, points = _sphere_tensors(sphere, cand.x_star)
    radius = (cand.sigma_r_star * HALF_MAX_SCALE)[..., None, None]
    x_m = cand.x_star[..., None, :] + radius * points
    return x_m, directions.expand(x_m.shape)


def build_reg_batch(
    field,
    cand: SurfaceCandidate,
    sphere: SphereLike,
    ray: Optional[Ray] = None,
) -> RegBatch:
    """Construct both batches and query the field at them.

    ``d_phi`` points from the surface towards the viewer, while fields and
    virtual rays take propagation directions, so both use ``-d_phi``.
    """
    x_m, d_m = build_spatial_batch(cand, sphere)
    x_phi, d_phi = build_directional_batch(cand, sphere)

    spatial = field.geometry(x_m)
    positions = x_phi[..., None, :].expand(d_phi.shape)

    incoming = -d_phi
    virtual = None
    covariances = None
    if ray is not None:
        virtual = build_virtual_rays(ray, cand.x_star, cand.cov_star, incoming)
        covariances = virtual.covariances
    directional = field.query_points(positions, incoming, covariances)

    return RegBatch(
        x_m=x_m,
        d_m=d_m,
        x_phi=x_phi,
        d_phi=d_phi,
        tau=spatial.tau,
        normals=spatial.normal,
        degenerate=spatial.degenerate,
        c_s=directional.c_s,
        color=directional.color() if directional.c_d is not None else None,
        virtual=virtual,
    )


def loss_density(cand: SurfaceCandidate, batch: RegBatch, lambda_d: float) -> torch.Tensor:
    """Penalise opaque spatial samples that sit off the tangent plane of n_star."""
    offset = batch.x_m - cand.x_star[..., None, :]
    dist = offset.norm(dim=-1)
    unit = offset / dist.clamp_min(COINCIDENT)[..., None]
    off_plane = (unit * cand.n_star[..., None, :]).sum(-1).abs()
    off_plane = torch.where(dist > COINCIDENT, off_plane, torch.zeros_like(off_plane))
    opacity = -torch.expm1(-batch.tau)
    return lambda_d * cand.w_star * (opacity * off_plane).sum(-1)


def loss_normal(cand: SurfaceCandidate, batch: RegBatch, lambda_n: float) -> torch.Tensor:
    """Penalise opaque spatial samples whose normals disagree with n_star."""
    agreement = (batch.normals * cand.n_star[..., None, :]).sum(-1)
    misalignment = (1 - agreement) / 2
    if batch.degenerate is not None:
        misalignment = torch.where(batch.degenerate, torch.zeros_like(misalignment), misalignment)
    opacity = -torch.expm1(-batch.tau)
    return lambda_n * cand.w_star * (opacity * misalignment).sum(-1)


def bias_denominator(c_s: torch.Tensor, mode: str = "channel_max") -> torch.Tensor:
    """Stop-gradient normaliser of the specular bias loss, one per ray."""
    c_s = c_s.detach()
    if mode == "channel_max":
        return c_s.amax(dim=-2).norm(dim=-1)
    if mode == "sample_norm":
        return c_s.norm(dim=-1).amax(dim=-1)
    raise ConfigError(f"unknown bias denominator '{mode}'")


def loss_specular_bias(
    cand: SurfaceCandidate,
    c_s: torch.Tensor,
    lambda_b: float,
    mode: str = "channel_max",
    denominator: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Normalised specular energy over the directional batch.

    Uniform specular colour over all directions is the maximum; a single
    bright direction costs one unit. ``denominator`` overrides the computed
    normaliser (it is treated as a constant either way).
    """
    if denominator is None:
        denominator = bias_denominator(c_s, mode)
    denominator = denominator.detach()
    active = denominator >= BIAS_GUARD
    safe = torch.where(active, denominator, torch.ones_like(denominator))
    normalised = c_s / safe[..., None, None]
    energy = (normalised**2).sum(dim=(-1, -2))
    energy = torch.where(active, energy, torch.zeros_like(energy))
    return lambda_b * cand.w_star * energy


def knn_indices(directions: torch.Tensor, k: int) -> Tuple[torch.Tensor, torch.Tensor]:
    """Indices and cosines of the k angularly nearest other directions.

    Self is excluded and ties go to the lower sample index.
    """
    n = directions.shape[-2]
    if n <= k:
        raise GeometryError(f"sphere TV needs more than k={k} samples, got {n}")
    dots = directions.detach() @ directions.detach().transpose(-1, -2)
    eye = torch.eye(n, dtype=torch.bool, device=dots.device)
    ranked = torch.where(eye, torch.full_like(dots, -math.inf), dots)
    _, order = torch.sort(ranked, dim=-1, descending=True, stable=True)
    neighbours = order[..., :k]
    cosines = torch.gather(dots, -1, neighbours)
    return neighbours, cosines


def loss_sphere_tv(
    d_phi: torch.Tensor,
    c_s: torch.Tensor,
    k: int,
    cand: SurfaceCandidate,
    lambda_s: float,
) -> torch.Tensor:
    """Edge-aware total variation of c_s over each sample's k nearest directions.

    Edges are directed: each sample sums over its own neighbours, weighted by
    ``(d_j . d_k + 1) / 2``.
    """
    neighbours, cosines = knn_indices(d_phi, k)
    edge_weight = (cosines + 1) / 2

    batch_shape = c_s.shape[:-2]
    n, channels = c_s.shape[-2], c_s.shape[-1]
    flat = neighbours.reshape(batch_shape + (n * k, 1)).expand(batch_shape + (n * k, channels))
    neighbour_colors = torch.gather(c_s, -2, flat).reshape(batch_shape + (n, k, channels))
    l1 = (c_s[..., :, None, :] - neighbour_colors).abs().sum(-1)
    return lambda_s * cand.w_star * (edge_weight * l1).sum(dim=(-1, -2))


def total_regularization(
    cand: SurfaceCandidate,
    batch: RegBatch,
    weights: LossWeights,
    settings: Optional[RegularizerSettings] = None,
    ray_count: Optional[int] = None,
    denominator: Optional[torch.Tensor] = None,
) -> RegLosses:
    """Sum of the four losses, averaged over ``ray_count`` rays.

    Gradients reach tau, the sample normals, c_s, w_star and n_star; the
    specular-bias normaliser is held constant. With ``tv_target="color"`` the
    total variation runs over the composite colour, so it also reaches c_d. Rays without a usable
    candidate contribute zero.
    """
    settings = settings or RegularizerSettings()
    usable = cand.usable
    count = ray_count if ray_count is not None else max(int(usable.numel()), 1)

    tv_colors = batch.c_s
    if settings.tv_target == "color":
        if batch.color is None:
            raise ConfigError("tv_target 'color' needs a field that returns diffuse colour")
        tv_colors = batch.color
    denom = denominator if denominator is not None else bias_denominator(batch.c_s, settings.bias_denominator)
    per_ray = {
        "L_d": loss_density(cand, batch, weights.lambda_d),
        "L_n": loss_normal(cand, batch, weights.lambda_n),
        "L_b": loss_specular_bias(cand, batch.c_s, weights.lambda_b, settings.bias_denominator, denom),
        "L_s": loss_sphere_tv(batch.d_phi, tv_colors, settings.knn_k, cand, weights.lambda_s),
    }
    if not settings.use_bias_loss:
        per_ray["L_b"] = torch.zeros_like(per_ray["L_b"])

    reduced = {}
    for name, values in per_ray.items():
        masked = torch.where(usable, values, torch.zeros_like(values))
        per_ray[name] = masked
        reduced[name] = masked.sum() / count

    return RegLosses(per_ray=per_ray, bias_denominator=denom, **reduced)
