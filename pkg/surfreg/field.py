"""Radiance-field interface and the trainable trilinear grid field."""

from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import torch
from torch import nn
from torch.nn import functional as F

DEGENERATE_GRADIENT = 1e-9
DEFAULT_BBOX = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))


@dataclass
class FieldQuery:
    """Positions and unit view directions to evaluate, with optional covariances.

    Covariances are carried so that integrated encodings can consume them; the
    fields in this package ignore them.
    """

    position: torch.Tensor
    direction: torch.Tensor
    covariance: Optional[torch.Tensor] = None


@dataclass
class FieldOutput:
    """Density, density-derived normals and the colour decomposition.

    ``normal`` is zero wherever ``degenerate`` is set. Colour fields are None
    for geometry-only queries.
    """

    tau: torch.Tensor
    normal: torch.Tensor
    degenerate: torch.Tensor
    c_d: Optional[torch.Tensor] = None
    tint: Optional[torch.Tensor] = None
    c_s: Optional[torch.Tensor] = None

    def color(self) -> torch.Tensor:
        """Composite colour ``clamp(c_d + s * c_s, 0, 1)``."""
        return (self.c_d + self.tint * self.c_s).clamp(0.0, 1.0)


def normals_from_gradient(grad_tau: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Unit ``-grad tau`` and the mask of points whose gradient is too small to orient."""
    norm = torch.sqrt((grad_tau**2).sum(-1, keepdim=True) + 1e-30)
    degenerate = norm[..., 0] <= DEGENERATE_GRADIENT
    normal = -grad_tau / norm.clamp_min(DEGENERATE_GRADIENT)
    normal = torch.where(degenerate[..., None], torch.zeros_like(normal), normal)
    return normal, degenerate


class RadianceField(ABC):
    """Anything that can be queried for density, normals and colour."""

    @abstractmethod
    def geometry(self, positions: torch.Tensor) -> FieldOutput:
        """Density and normals only."""

    @abstractmethod
    def query_points(
        self,
        positions: torch.Tensor,
        directions: torch.Tensor,
        covariances: Optional[torch.Tensor] = None,
    ) -> FieldOutput:
        """Full query at positions seen from directions."""

    def query(self, q: FieldQuery) -> FieldOutput:
        return self.query_points(q.position, q.direction, q.covariance)


def trilinear(
    grid: torch.Tensor,
    positions: torch.Tensor,
    bbox_min: torch.Tensor,
    bbox_max: torch.Tensor,
    with_gradient: bool = False,
) -> Tuple[torch.Tensor, Optional[torch.Tensor]]:
    """Trilinearly interpolate a (C, D, D, D) vertex grid at positions (..., 3).

    Returns values shaped (..., C) and, when requested, the analytic spatial
    gradient shaped (..., C, 3). Positions outside the box are clamped onto
    it, where the gradient along the clamped axis is zero.
    """
    batch_shape = positions.shape[:-1]
    channels, res = grid.shape[0], grid.shape[-1]
    x = positions.reshape(-1, 3)

    scale = (res - 1) / (bbox_max - bbox_min)
    u = (x - bbox_min) * scale
    inside = (u >= 0) & (u <= res - 1)
    u = u.clamp(0, res - 1)
    i0 = u.detach().floor().clamp(max=res - 2).long()
    f = u - i0.to(u.dtype)

    ix, iy, iz = i0.unbind(-1)
    fx, fy, fz = f.unbind(-1)
    wx = (1 - fx, fx)
    wy = (1 - fy, fy)
    wz = (1 - fz, fz)

    value = torch.zeros(x.shape[0], channels, dtype=grid.dtype, device=grid.device)
    grad = torch.zeros(x.shape[0], channels, 3, dtype=grid.dtype, device=grid.device) if with_gradient else None
    sign = (-1.0, 1.0)
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                corner = grid[:, ix + dx, iy + dy, iz + dz].transpose(0, 1)
                value = value + (wx[dx] * wy[dy] * wz[dz])[:, None] * corner
                if with_gradient:
                    partial = torch.stack(
                        [
                            sign[dx] * wy[dy] * wz[dz],
                            wx[dx] * sign[dy] * wz[dz],
                            wx[dx] * wy[dy] * sign[dz],
                        ],
                        dim=-1,
                    )
                    grad = grad + corner[:, :, None] * partial[:, None, :]

    value = value.reshape(batch_shape + (channels,))
    if with_gradient:
        grad = grad * (scale * inside.to(grid.dtype))[:, None, :]
        grad = grad.reshape(batch_shape + (channels, 3))
    return value, grad


class GridField(nn.Module, RadianceField):
    """Dense trilinear density grid, colour grids and a two-layer view head.

    Density is ``softplus`` of an interpolated raw grid; diffuse colour and tint
    are sigmoid-bounded grid channels; specular colour comes from a small MLP
    over interpolated features and the view direction.
    """

    def __init__(
        self,
        grid_resolution: int = 64,
        color_resolution: int = 32,
        feature_dim: int = 8,
        hidden_dim: int = 32,
        bbox: Sequence[Sequence[float]] = DEFAULT_BBOX,
        dtype: torch.dtype = torch.float32,
        seed: int = 0,
        initial_density: float = 0.1,
    ):
        super().__init__()
        self.grid_resolution = grid_resolution
        self.color_resolution = color_resolution
        self.feature_dim = feature_dim
        self.hidden_dim = hidden_dim

        g = torch.Generator().manual_seed(seed)
        raw_init = float(torch.log(torch.expm1(torch.tensor(initial_density, dtype=torch.float64))))
        dr, cr = grid_resolution, color_resolution

        self.density = nn.Parameter(torch.full((1, dr, dr, dr), raw_init, dtype=dtype))
        self.diffuse = nn.Parameter(torch.zeros(3, cr, cr, cr, dtype=dtype))
        self.tint = nn.Parameter(torch.zeros(3, cr, cr, cr, dtype=dtype))
        self.features = nn.Parameter(
            0.1 * torch.randn(feature_dim, cr, cr, cr, generator=g, dtype=torch.float64).to(dtype)
        )
        self.view_head = nn.Sequential(
            nn.Linear(feature_dim + 3, hidden_dim),
            nn.Softplus(),
            nn.Linear(hidden_dim, 3),
        ).to(dtype)
        for layer in self.view_head:
            if isinstance(layer, nn.Linear):
                bound = 1.0 / layer.in_features**0.5
                with torch.no_grad():
                    layer.weight.copy_((torch.rand(layer.weight.shape, generator=g, dtype=torch.float64) * 2 - 1) * bound)
                    layer.bias.copy_((torch.rand(layer.bias.shape, generator=g, dtype=torch.float64) * 2 - 1) * bound)

        bbox = torch.as_tensor(bbox, dtype=dtype)
        self.register_buffer("bbox_min", bbox[0].clone())
        self.register_buffer("bbox_max", bbox[1].clone())

    @property
    def dtype(self) -> torch.dtype:
        return self.density.dtype

    def geometry(self, positions: torch.Tensor) -> FieldOutput:
        raw, raw_grad = trilinear(self.density, positions, self.bbox_min, self.bbox_max, with_gradient=True)
        raw = raw[..., 0]
        tau = F.softplus(raw)
        grad_tau = torch.sigmoid(raw)[..., None] * raw_grad[..., 0, :]
        normal, degenerate = normals_from_gradient(grad_tau)
        return FieldOutput(tau=tau, normal=normal, degenerate=degenerate)

    def density_gradient(self, positions: torch.Tensor) -> torch.Tensor:
        """Analytic ``grad tau`` at positions (..., 3)."""
        raw, raw_grad = trilinear(self.density, positions, self.bbox_min, self.bbox_max, with_gradient=True)
        return torch.sigmoid(raw[..., 0])[..., None] * raw_grad[..., 0, :]

    def appearance(self, positions: torch.Tensor, directions: torch.Tensor):
        """Diffuse colour, tint and specular colour at positions seen from directions."""
        grids = torch.cat([self.diffuse, self.tint, self.features], dim=0)
        values, _ = trilinear(grids, positions, self.bbox_min, self.bbox_max)
        c_d = torch.sigmoid(values[..., :3])
        tint = torch.sigmoid(values[..., 3:6])
        features = values[..., 6:]
        directions = directions.expand(features.shape[:-1] + (3,))
        c_s = torch.sigmoid(self.view_head(torch.cat([features, directions], dim=-1)))
        return c_d, tint, c_s

    def query_points(self, positions, directions, covariances=None) -> FieldOutput:
        out = self.geometry(positions)
        out.c_d, out.tint, out.c_s = self.appearance(positions, directions)
        return out

    def forward(self, positions: torch.Tensor, directions: torch.Tensor) -> FieldOutput:
        return self.query_points(positions, directions)

    def specular_parameters(self):
        """Parameters that only influence the specular colour."""
        return [self.features] + list(self.view_head.parameters())
