"""Analytic scenes, pinhole cameras and ground-truth rendering."""

import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
import torch

from .errors import ConfigError, GeometryError
from .field import FieldOutput, RadianceField
from .geometry import Ray

SCENE_KINDS = ("plane", "sphere")


def _vec(values) -> torch.Tensor:
    return torch.as_tensor(values, dtype=torch.float64)


def _normalize(v: torch.Tensor) -> torch.Tensor:
    return v / v.norm(dim=-1, keepdim=True).clamp_min(1e-12)


def reflect(d: torch.Tensor, n: torch.Tensor) -> torch.Tensor:
    """Mirror ``d`` about the plane with normal ``n``."""
    return d - 2 * (d * n).sum(-1, keepdim=True) * n


@dataclass
class AnalyticScene:
    """A textured plane patch or sphere with a Gaussian density ridge and a specular lobe."""

    kind: str = "plane"
    point: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    normal: Tuple[float, float, float] = (0.0, 0.0, 1.0)
    radius: float = 0.6
    half_extent: float = 0.8
    ridge_width: float = 0.02
    peak_density: float = 50.0
    texture_scale: float = 4.0
    texture_colors: Tuple[Tuple[float, float, float], Tuple[float, float, float]] = (
        (0.75, 0.35, 0.2),
        (0.25, 0.45, 0.7),
    )
    tint: Tuple[float, float, float] = (0.8, 0.8, 0.8)
    lobe_color: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    lobe_amplitude: float = 0.9
    lobe_sharpness: float = 30.0
    light_direction: Tuple[float, float, float] = (0.3, 0.2, 0.93)

    def __post_init__(self):
        if self.kind not in SCENE_KINDS:
            raise ConfigError(f"unknown scene kind '{self.kind}', expected one of {SCENE_KINDS}")
        if self.kind == "plane" and float(_vec(self.normal).norm()) < 1e-12:
            raise ConfigError("plane normal must be non-zero")
        if self.kind == "sphere" and self.radius <= 0:
            raise ConfigError("sphere radius must be positive")
        if self.ridge_width <= 0:
            raise ConfigError("ridge width must be positive")

    @classmethod
    def from_name(cls, kind: str, **overrides) -> "AnalyticScene":
        """Default plane-with-highlight or sphere scene."""
        return cls(kind=kind, **overrides)

    @property
    def plane_normal(self) -> torch.Tensor:
        return _normalize(_vec(self.normal))

    def _tangent_basis(self) -> Tuple[torch.Tensor, torch.Tensor]:
        n = self.plane_normal
        helper = _vec((1.0, 0.0, 0.0)) if abs(float(n[0])) < 0.9 else _vec((0.0, 1.0, 0.0))
        u = _normalize(torch.cross(n, helper, dim=-1))
        v = torch.cross(n, u, dim=-1)
        return u, v

    def surface_distance(self, x: torch.Tensor) -> torch.Tensor:
        """Euclidean distance from x to the surface."""
        p = _vec(self.point).to(x.dtype)
        if self.kind == "plane":
            n = self.plane_normal.to(x.dtype)
            u, v = (b.to(x.dtype) for b in self._tangent_basis())
            rel = x - p
            height = (rel * n).sum(-1)
            overflow_u = ((rel * u).sum(-1).abs() - self.half_extent).clamp_min(0)
            overflow_v = ((rel * v).sum(-1).abs() - self.half_extent).clamp_min(0)
            return torch.sqrt(height**2 + overflow_u**2 + overflow_v**2)
        return ((x - p).norm(dim=-1) - self.radius).abs()

    def surface_normal(self, x: torch.Tensor) -> torch.Tensor:
        """True outward normal of the surface point nearest to x."""
        if self.kind == "plane":
            return self.plane_normal.to(x.dtype).expand(x.shape)
        return _normalize(x - _vec(self.point).to(x.dtype))

    def texture(self, x: torch.Tensor) -> torch.Tensor:
        """Checkerboard diffuse colour in surface coordinates."""
        rel = x - _vec(self.point).to(x.dtype)
        if self.kind == "plane":
            u, v = self._tangent_basis()
            a = (rel * u.to(x.dtype)).sum(-1)
            b = (rel * v.to(x.dtype)).sum(-1)
        else:
            n = _normalize(rel)
            a = torch.atan2(n[..., 1], n[..., 0]) / math.pi
            b = torch.asin(n[..., 2].clamp(-1, 1)) / math.pi
        parity = (torch.floor(a * self.texture_scale) + torch.floor(b * self.texture_scale)) % 2
        first, second = (_vec(c).to(x.dtype) for c in self.texture_colors)
        return torch.where(parity[..., None] < 0.5, first, second)

    def specular(self, normal: torch.Tensor, direction: torch.Tensor) -> torch.Tensor:
        """Lobe around the mirror reflection of the view direction about the normal."""
        light = _normalize(_vec(self.light_direction)).to(normal.dtype)
        mirrored = reflect(direction, normal)
        cosine = (mirrored * light).sum(-1, keepdim=True)
        lobe = torch.exp(self.lobe_sharpness * (cosine - 1))
        return self.lobe_amplitude * _vec(self.lobe_color).to(normal.dtype) * lobe

    def intersect(self, origins: torch.Tensor, directions: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """First-hit distance along each ray and a hit mask."""
        p = _vec(self.point).to(origins.dtype)
        if self.kind == "plane":
            n = self.plane_normal.to(origins.dtype)
            denom = (directions * n).sum(-1)
            safe = torch.where(denom.abs() > 1e-12, denom, torch.ones_like(denom))
            t = ((p - origins) * n).sum(-1) / safe
            hit_point = origins + t[..., None] * directions
            u, v = (b.to(origins.dtype) for b in self._tangent_basis())
            rel = hit_point - p
            inside = ((rel * u).sum(-1).abs() <= self.half_extent) & ((rel * v).sum(-1).abs() <= self.half_extent)
            hit = (denom.abs() > 1e-12) & (t > 0) & inside
            return torch.where(hit, t, torch.zeros_like(t)), hit

        oc = origins - p
        b = (directions * oc).sum(-1)
        c = (oc * oc).sum(-1) - self.radius**2
        disc = b * b - c
        root = torch.sqrt(disc.clamp_min(0))
        t_near = -b - root
        t_far = -b + root
        t = torch.where(t_near > 0, t_near, t_far)
        hit = (disc >= 0) & (t > 0)
        return torch.where(hit, t, torch.zeros_like(t)), hit


class AnalyticField(RadianceField):
    """Ground-truth field of an analytic scene, used as an oracle."""

    def __init__(self, scene: AnalyticScene, bbox=((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))):
        self.scene = scene
        bbox = torch.as_tensor(bbox, dtype=torch.float64)
        self.bbox_min, self.bbox_max = bbox[0], bbox[1]

    def geometry(self, positions: torch.Tensor) -> FieldOutput:
        dist = self.scene.surface_distance(positions)
        tau = self.scene.peak_density * torch.exp(-(dist**2) / (2 * self.scene.ridge_width**2))
        normal = self.scene.surface_normal(positions)
        degenerate = torch.zeros(tau.shape, dtype=torch.bool)
        return FieldOutput(tau=tau, normal=normal, degenerate=degenerate)

    def query_points(self, positions, directions, covariances=None) -> FieldOutput:
        out = self.geometry(positions)
        directions = directions.expand(positions.shape)
        out.c_d = self.scene.texture(positions)
        out.tint = _vec(self.scene.tint).to(positions.dtype).expand(positions.shape)
        out.c_s = self.scene.specular(out.normal, directions)
        return out


def analytic_query(scene: AnalyticScene, q) -> FieldOutput:
    """Query the analytic oracle field of ``scene``."""
    return AnalyticField(scene).query(q)


@dataclass
class Camera:
    """Pinhole camera looking from ``position`` towards ``look``."""

    position: Tuple[float, float, float]
    look: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    up: Tuple[float, float, float] = (0.0, 0.0, 1.0)
    fov_deg: float = 40.0
    view_id: int = 0

    def __post_init__(self):
        forward = _vec(self.look) - _vec(self.position)
        if forward.norm() < 1e-12:
            raise GeometryError(f"camera {self.view_id} looks at its own position")
        up = _vec(self.up)
        if torch.cross(forward, up, dim=-1).norm() <= 1e-9 * forward.norm() * up.norm():
            raise GeometryError(f"camera {self.view_id}: up {tuple(self.up)} is parallel to the view direction")

    def focal(self, width: int) -> float:
        return 0.5 * width / math.tan(math.radians(self.fov_deg) / 2)

    def rays(self, width: int, height: int, dtype: torch.dtype = torch.float64) -> Ray:
        """One ray per pixel centre, batched as (H, W)."""
        position = _vec(self.position)
        forward = _normalize(_vec(self.look) - position)
        right = _normalize(torch.cross(forward, _vec(self.up), dim=-1))
        true_up = torch.cross(right, forward, dim=-1)

        focal = self.focal(width)
        ys, xs = torch.meshgrid(
            torch.arange(height, dtype=torch.float64) + 0.5,
            torch.arange(width, dtype=torch.float64) + 0.5,
            indexing="ij",
        )
        px = (xs - width / 2) / focal
        py = (ys - height / 2) / focal
        directions = _normalize(forward + px[..., None] * right - py[..., None] * true_up)
        origins = position.expand(directions.shape)
        radius_rate = torch.full((height, width), 2.0 / (math.sqrt(12.0) * focal), dtype=torch.float64)
        return Ray(origins.to(dtype), directions.to(dtype), radius_rate.to(dtype))


def orbit_cameras(
    n_views: int,
    radius: float = 3.0,
    min_elevation_deg: float = 30.0,
    max_elevation_deg: float = 70.0,
    fov_deg: float = 40.0,
    phase: float = 0.0,
    first_id: int = 0,
) -> List[Camera]:
    """Cameras on a golden-angle spiral over the upper hemisphere, looking at the origin."""
    golden_angle = math.pi * (3.0 - math.sqrt(5.0))
    cameras = []
    for k in range(n_views):
        frac = (k + 0.5) / n_views
        elevation = math.radians(min_elevation_deg + frac * (max_elevation_deg - min_elevation_deg))
        azimuth = (k + phase) * golden_angle
        position = (
            radius * math.cos(elevation) * math.cos(azimuth),
            radius * math.cos(elevation) * math.sin(azimuth),
            radius * math.sin(elevation),
        )
        cameras.append(Camera(position=position, fov_deg=fov_deg, view_id=first_id + k))
    return cameras


@dataclass
class GroundTruthView:
    """Rendered image with depth, normals and the foreground mask, as numpy arrays."""

    camera: Camera
    image: np.ndarray
    depth: np.ndarray
    normal: np.ndarray
    mask: np.ndarray
    diffuse: Optional[np.ndarray] = None
    specular: Optional[np.ndarray] = None


def render_ground_truth(scene: AnalyticScene, camera: Camera, width: int, height: int) -> GroundTruthView:
    """Closed-form first-surface render of an analytic scene."""
    rays = camera.rays(width, height)
    t, hit = scene.intersect(rays.origin, rays.direction)
    points = rays.at(t)
    normal = scene.surface_normal(points)
    c_d = scene.texture(points)
    tint = _vec(scene.tint)
    c_s = scene.specular(normal, rays.direction)

    mask = hit[..., None]
    zero = torch.zeros_like(c_d)
    image = torch.where(mask, (c_d + tint * c_s).clamp(0, 1), zero)
    diffuse = torch.where(mask, c_d, zero)
    specular = torch.where(mask, (tint * c_s).clamp(0, 1), zero)
    normal = torch.where(mask, normal, zero)
    return GroundTruthView(
        camera=camera,
        image=image.numpy(),
        depth=t.numpy(),
        normal=normal.numpy(),
        mask=hit.numpy(),
        diffuse=diffuse.numpy(),
        specular=specular.numpy(),
    )
