"""Conical frustum Gaussians and virtual rays about a surface point."""

from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np
import torch

from .errors import GeometryError
from .sphere import SampleSphere

TensorLike = Union[torch.Tensor, np.ndarray, float]

PARALLEL_EPS = 1e-12


def _tensor(value: TensorLike, like: torch.Tensor = None) -> torch.Tensor:
    if isinstance(value, torch.Tensor):
        return value
    dtype = like.dtype if like is not None else torch.float64
    return torch.as_tensor(np.asarray(value), dtype=dtype)


@dataclass
class Ray:
    """Ray origin, unit direction and pixel footprint growth rate (batched)."""

    origin: torch.Tensor
    direction: torch.Tensor
    radius_rate: torch.Tensor

    def __post_init__(self):
        self.origin = _tensor(self.origin)
        self.direction = _tensor(self.direction, self.origin)
        self.radius_rate = _tensor(self.radius_rate, self.origin)

    def at(self, t: torch.Tensor) -> torch.Tensor:
        return self.origin + t[..., None] * self.direction


@dataclass
class ConicalGaussian:
    """Along-ray moments and their lifted 3D Gaussian."""

    t_mu: torch.Tensor
    sigma_t2: torch.Tensor
    sigma_r2: torch.Tensor
    mean3: torch.Tensor
    cov3: torch.Tensor


@dataclass
class VirtualRayBatch:
    """Rays rotated about x_star onto each sampling direction."""

    origins: torch.Tensor
    directions: torch.Tensor
    covariances: torch.Tensor
    rotations: torch.Tensor


def frustum_moments(
    t0: TensorLike, t1: TensorLike, radius_rate: TensorLike
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Mean, axial variance and radial variance of a conical frustum.

    Uses the midpoint/half-width parameterisation, which stays exact as the
    interval collapses: t_mu -> t0, sigma_t2 -> 0, sigma_r2 -> r^2 t0^2 / 4.
    """
    t0 = _tensor(t0)
    t1 = _tensor(t1, t0)
    radius_rate = _tensor(radius_rate, t0)
    if bool((t0 <= 0).any()):
        raise GeometryError("frustum start must be positive")
    if bool((t1 < t0).any()):
        raise GeometryError("frustum end must not precede its start")

    mu = (t0 + t1) / 2
    hw = (t1 - t0) / 2
    denom = 3 * mu**2 + hw**2
    t_mu = mu + (2 * mu * hw**2) / denom
    sigma_t2 = hw**2 / 3 - (4.0 / 15.0) * (hw**4 * (12 * mu**2 - hw**2)) / denom**2
    sigma_r2 = radius_rate**2 * (mu**2 / 4 + (5.0 / 12.0) * hw**2 - (4.0 / 15.0) * hw**4 / denom)
    return t_mu, sigma_t2, sigma_r2


def lift_gaussian(
    ray: Ray, moments: Tuple[torch.Tensor, torch.Tensor, torch.Tensor]
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Lift along-ray moments to a 3D mean and covariance.

    ``moments`` may carry one extra trailing sample axis relative to the ray.
    """
    t_mu, sigma_t2, sigma_r2 = moments
    origin, direction = ray.origin, ray.direction
    if t_mu.dim() > origin.dim() - 1:
        origin = origin[..., None, :]
        direction = direction[..., None, :]

    mean = origin + t_mu[..., None] * direction
    d_outer = direction[..., :, None] * direction[..., None, :]
    eye = torch.eye(3, dtype=direction.dtype)
    cov = sigma_t2[..., None, None] * d_outer + sigma_r2[..., None, None] * (eye - d_outer)
    return mean, cov


def conical_gaussian(ray: Ray, t0: torch.Tensor, t1: torch.Tensor) -> ConicalGaussian:
    """Frustum moments and lifted Gaussian for intervals [t0, t1] along ``ray``."""
    rate = ray.radius_rate
    if t0.dim() > rate.dim():
        rate = rate[..., None]
    moments = frustum_moments(t0, t1, rate)
    mean3, cov3 = lift_gaussian(ray, moments)
    return ConicalGaussian(*moments, mean3=mean3, cov3=cov3)


def _least_aligned_axis(d: torch.Tensor) -> torch.Tensor:
    axis = torch.argmin(d.abs(), dim=-1)
    return torch.nn.functional.one_hot(axis, 3).to(d.dtype)


def _outer(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return a[..., :, None] * b[..., None, :]


def _unit_or(v: torch.Tensor, fallback: torch.Tensor) -> torch.Tensor:
    norm = v.norm(dim=-1, keepdim=True)
    return torch.where(norm > PARALLEL_EPS, v / norm.clamp_min(PARALLEL_EPS), fallback)


def rotation_between(d_from: TensorLike, d_to: TensorLike) -> torch.Tensor:
    """Minimal-angle rotation taking unit ``d_from`` to unit ``d_to`` (broadcasting).

    Built in the orthonormal frame (d_from, u) of the rotation plane, where ``u``
    is the part of ``d_to`` orthogonal to ``d_from``, with the angle from
    ``atan2``. This keeps ``R d_from = d_to`` to rounding for nearly antiparallel
    pairs. Exactly (anti)parallel pairs use the plane spanned by ``d_from`` and
    its cross product with the least-aligned canonical axis.
    """
    d_from = _tensor(d_from)
    d_to = _tensor(d_to, d_from)
    d_from, d_to = torch.broadcast_tensors(d_from, d_to)

    c = (d_from * d_to).sum(-1, keepdim=True)
    u = d_to - c * d_from
    s = u.norm(dim=-1, keepdim=True)

    fallback = torch.cross(torch.cross(d_from, _least_aligned_axis(d_from), dim=-1), d_from, dim=-1)
    e2 = _unit_or(u, fallback / fallback.norm(dim=-1, keepdim=True))
    e2 = e2 - (e2 * d_from).sum(-1, keepdim=True) * d_from
    e2 = e2 / e2.norm(dim=-1, keepdim=True)

    angle = torch.atan2(s, c)[..., None]
    cos, sin = torch.cos(angle), torch.sin(angle)
    e1 = d_from
    eye = torch.eye(3, dtype=d_from.dtype).expand(d_from.shape[:-1] + (3, 3))
    return eye + (cos - 1) * (_outer(e1, e1) + _outer(e2, e2)) + sin * (_outer(e2, e1) - _outer(e1, e2))


def build_virtual_rays(
    ray: Ray,
    x_star: torch.Tensor,
    cov_star: torch.Tensor,
    sphere: Union[SampleSphere, torch.Tensor],
) -> VirtualRayBatch:
    """Rotate the ray about x_star onto every sampling direction.

    ``o_s = R_s (o - x_star) + x_star`` and ``Sigma_s = R_s Sigma_star R_s^T`` where
    ``R_s`` takes the ray direction to ``d_s``. ``sphere`` is either a rotated
    SampleSphere or a tensor of directions shaped (..., N, 3).
    """
    if isinstance(sphere, SampleSphere):
        directions = _tensor(sphere.unit_directions, ray.origin)
    else:
        directions = sphere
    rotations = rotation_between(ray.direction[..., None, :], directions)

    offset = (ray.origin - x_star)[..., None, :, None]
    origins = (rotations @ offset)[..., 0] + x_star[..., None, :]
    covariances = rotations @ cov_star[..., None, :, :] @ rotations.transpose(-1, -2)
    return VirtualRayBatch(origins, directions, covariances, rotations)
