"""Quadrature volume rendering and first-surface selection."""

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import torch

from .field import FieldOutput, RadianceField
from .geometry import ConicalGaussian, Ray, conical_gaussian
from .regularizers import SurfaceCandidate
from .scene import Camera

BACKGROUND_ACCUMULATION = 0.05
EPS = 1e-10


@dataclass
class RaySamples:
    """Interval edges (..., K+1), their Gaussians and the field outputs at them."""

    t: torch.Tensor
    gaussians: ConicalGaussian
    outputs: FieldOutput

    @property
    def t_mid(self) -> torch.Tensor:
        return (self.t[..., 1:] + self.t[..., :-1]) / 2

    @property
    def deltas(self) -> torch.Tensor:
        return self.t[..., 1:] - self.t[..., :-1]


@dataclass
class RenderResult:
    """Composited colour, weights and geometry of a batch of rays."""

    color: torch.Tensor
    weights: torch.Tensor
    transmittance: torch.Tensor
    depth: torch.Tensor
    disparity: torch.Tensor
    normal: torch.Tensor
    accumulation: torch.Tensor
    median_depth: torch.Tensor
    diffuse: Optional[torch.Tensor] = None
    specular: Optional[torch.Tensor] = None

    @property
    def background(self) -> torch.Tensor:
        return self.accumulation < BACKGROUND_ACCUMULATION


def render_ray(samples: RaySamples) -> RenderResult:
    """Composite field outputs along rays.

    ``alpha_i = 1 - exp(-tau_i delta_i)``, ``T_i = exp(-sum_{j<i} tau_j delta_j)`` and
    ``w_i = T_i alpha_i``. Colours are clamped per sample before compositing.
    """
    out = samples.outputs
    optical = out.tau * samples.deltas
    alpha = -torch.expm1(-optical)
    accumulated = torch.cumsum(optical, dim=-1)
    trans = torch.exp(-torch.cat([torch.zeros_like(accumulated[..., :1]), accumulated], dim=-1))
    weights = trans[..., :-1] * alpha
    acc = weights.sum(-1)

    t_mid = samples.t_mid
    weighted_t = (weights * t_mid).sum(-1)
    depth = weighted_t / acc.clamp_min(EPS)
    disparity = acc / weighted_t.clamp_min(EPS)

    normal_sum = (weights[..., None] * out.normal).sum(-2)
    normal = normal_sum / normal_sum.norm(dim=-1, keepdim=True).clamp_min(EPS)

    cumulative = torch.cumsum(weights, dim=-1)
    reached = cumulative >= 0.5
    median_index = torch.argmax(reached.float(), dim=-1)
    median_depth = torch.gather(t_mid, -1, median_index[..., None])[..., 0]
    median_depth = torch.where(reached.any(-1), median_depth, samples.t[..., -1])

    color = diffuse = specular = None
    if out.c_d is not None:
        color = (weights[..., None] * out.color()).sum(-2)
        diffuse = (weights[..., None] * out.c_d).sum(-2)
        specular = (weights[..., None] * (out.tint * out.c_s).clamp(0, 1)).sum(-2)

    return RenderResult(
        color=color,
        weights=weights,
        transmittance=trans[..., -1],
        depth=depth,
        disparity=disparity,
        normal=normal,
        accumulation=acc,
        median_depth=median_depth,
        diffuse=diffuse,
        specular=specular,
    )


def ray_box_bounds(ray: Ray, bbox_min: torch.Tensor, bbox_max: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Slab intersection of rays with an axis-aligned box: (near, far, hit)."""
    direction = torch.where(ray.direction.abs() < 1e-12, torch.full_like(ray.direction, 1e-12), ray.direction)
    inv = 1.0 / direction
    t_a = (bbox_min - ray.origin) * inv
    t_b = (bbox_max - ray.origin) * inv
    near = torch.minimum(t_a, t_b).amax(-1).clamp_min(1e-4)
    far = torch.maximum(t_a, t_b).amin(-1)
    hit = far > near
    far = torch.where(hit, far, near + 1.0)
    return near, far, hit


def interval_edges(
    near: torch.Tensor,
    far: torch.Tensor,
    n_intervals: int,
    stratified: bool = False,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """Evenly spaced edges between near and far, optionally jittered within each bin."""
    steps = torch.linspace(0.0, 1.0, n_intervals + 1, dtype=near.dtype)
    edges = near[..., None] + (far - near)[..., None] * steps
    if stratified:
        mids = (edges[..., 1:] + edges[..., :-1]) / 2
        upper = torch.cat([mids, edges[..., -1:]], dim=-1)
        lower = torch.cat([edges[..., :1], mids], dim=-1)
        u = torch.rand(edges.shape, generator=generator, dtype=torch.float64).to(edges.dtype)
        edges = lower + (upper - lower) * u
        edges, _ = torch.sort(edges, dim=-1)
    return edges


def sample_rays(
    field: RadianceField,
    ray: Ray,
    n_intervals: int = 64,
    stratified: bool = False,
    generator: Optional[torch.Generator] = None,
    bbox: Optional[Tuple[torch.Tensor, torch.Tensor]] = None,
) -> Tuple[RaySamples, torch.Tensor]:
    """Query the field at the Gaussian mean of every interval inside the box."""
    if bbox is None:
        bbox = (field.bbox_min, field.bbox_max)
    near, far, hit = ray_box_bounds(ray, bbox[0], bbox[1])
    t = interval_edges(near, far, n_intervals, stratified, generator)
    gaussians = conical_gaussian(ray, t[..., :-1], t[..., 1:])
    directions = ray.direction[..., None, :].expand(gaussians.mean3.shape)
    outputs = field.query_points(gaussians.mean3, directions, gaussians.cov3)
    outputs.tau = outputs.tau * hit[..., None].to(outputs.tau.dtype)
    return RaySamples(t=t, gaussians=gaussians, outputs=outputs), hit


def lower_median(weights: torch.Tensor) -> torch.Tensor:
    """Median along the last axis; the lower of the two middle values for even lengths."""
    return torch.median(weights, dim=-1).values


def select_surface(samples: RaySamples, result: RenderResult) -> Optional[SurfaceCandidate]:
    """First interval whose weight strictly exceeds the ray's median weight.

    Batched inputs return a candidate with a ``valid`` mask; a single ray with
    no qualifying interval returns None.
    """
    weights = result.weights
    above = weights > lower_median(weights)[..., None]
    valid = above.any(-1)
    index = torch.argmax(above.float(), dim=-1)

    def pick(values: torch.Tensor, trailing: int) -> torch.Tensor:
        idx = index.reshape(index.shape + (1,) * (trailing + 1))
        idx = idx.expand(index.shape + (1,) + values.shape[values.dim() - trailing:])
        return torch.gather(values, index.dim(), idx).squeeze(index.dim())

    g = samples.gaussians
    candidate = SurfaceCandidate(
        x_star=pick(g.mean3, 1),
        n_star=pick(samples.outputs.normal, 1),
        w_star=pick(weights, 0),
        cov_star=pick(g.cov3, 2),
        sigma_r_star=torch.sqrt(pick(g.sigma_r2, 0).clamp_min(0)),
        index=index,
        valid=valid,
        degenerate=pick(samples.outputs.degenerate, 0),
    )
    if weights.dim() == 1 and not bool(valid):
        return None
    return candidate


@dataclass
class RenderedView:
    """Numpy render of one view."""

    view_id: int
    image: np.ndarray
    accumulation: np.ndarray
    disparity: np.ndarray
    normal: np.ndarray
    depth: Optional[np.ndarray] = None
    median_depth: Optional[np.ndarray] = None
    diffuse: Optional[np.ndarray] = None
    specular: Optional[np.ndarray] = None


@torch.no_grad()
def render_view(
    field: RadianceField,
    camera: Camera,
    width: int,
    height: int,
    n_intervals: int = 64,
    chunk: int = 4096,
) -> RenderedView:
    """Render every pixel of a camera without stratification."""
    dtype = getattr(field, "dtype", torch.float64)
    rays = camera.rays(width, height, dtype=dtype)
    origins = rays.origin.reshape(-1, 3)
    directions = rays.direction.reshape(-1, 3)
    rates = rays.radius_rate.reshape(-1)

    parts = []
    for start in range(0, origins.shape[0], chunk):
        stop = start + chunk
        ray = Ray(origins[start:stop], directions[start:stop], rates[start:stop])
        samples, _ = sample_rays(field, ray, n_intervals)
        parts.append(render_ray(samples))

    def gather(name: str, channels: int = 0) -> np.ndarray:
        values = torch.cat([getattr(p, name) for p in parts], dim=0).double().numpy()
        shape = (height, width, channels) if channels else (height, width)
        return values.reshape(shape)

    return RenderedView(
        view_id=camera.view_id,
        image=gather("color", 3),
        accumulation=gather("accumulation"),
        disparity=gather("disparity"),
        normal=gather("normal", 3),
        depth=gather("depth"),
        median_depth=gather("median_depth"),
        diffuse=gather("diffuse", 3),
        specular=gather("specular", 3),
    )
