"""Deterministic sampling of the unit sphere and unit ball.

The lattice is the uniform (zero-concentration) limit of a Fibonacci-Kronecker
lattice. Directions are split into log2(N) shells to cover the unit ball, and a
uniformly random rotation from SO(3) is applied per use.
"""

import math
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

from .errors import ConfigError, GeometryError

INV_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0
U64_MAX = 2**64 - 1


def is_power_of_two(value: int) -> bool:
    """Return True for 1, 2, 4, 8, ..."""
    return value >= 1 and (value & (value - 1)) == 0


@dataclass(frozen=True)
class LatticeConfig:
    """Size of the sampling lattice and the seed of its rotation stream."""

    n_samples: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 2 or not is_power_of_two(self.n_samples):
            raise GeometryError(
                f"n_samples must be a power of two >= 2, got {self.n_samples}"
            )
        if not 0 <= self.seed <= U64_MAX:
            raise GeometryError(f"seed must be an unsigned 64-bit integer, got {self.seed}")


def fibonacci_sphere(n_samples: int) -> np.ndarray:
    """Return ``n_samples`` unit directions of the uniform Fibonacci-Kronecker lattice.

    Row ``i - 1`` holds ``[w, sqrt(1 - w^2) cos(2 pi i / Phi), sqrt(1 - w^2) sin(2 pi i / Phi)]``
    with ``w = (N - 2i + 1) / N`` for ``i = 1..N``.
    """
    if n_samples < 1:
        raise GeometryError(f"n_samples must be positive, got {n_samples}")

    i = np.arange(1, n_samples + 1, dtype=np.float64)
    w = (n_samples - 2.0 * i + 1.0) / n_samples
    azimuth = 2.0 * math.pi * i * INV_GOLDEN
    rho = np.sqrt(np.clip(1.0 - w * w, 0.0, None))
    return np.stack([w, rho * np.cos(azimuth), rho * np.sin(azimuth)], axis=-1)


def shell_radii(n_samples: int) -> np.ndarray:
    """Shell radius of each sample: ``(1 + i mod log2 N) / log2 N`` for ``i = 0..N-1``."""
    if n_samples < 2 or not is_power_of_two(n_samples):
        raise GeometryError(
            f"ball partition needs a power of two >= 2 samples, got {n_samples}"
        )
    shells = int(round(math.log2(n_samples)))
    index = np.arange(n_samples)
    return (1.0 + (index % shells)) / shells


def ball_partition(directions: np.ndarray) -> np.ndarray:
    """Scale lattice directions onto log2(N) shells inside the unit ball."""
    directions = np.asarray(directions, dtype=np.float64)
    radii = shell_radii(directions.shape[0])
    return directions * radii[:, None]


def arvo_rotations(uniforms: np.ndarray) -> np.ndarray:
    """Map triples of U(0, 1) variates to rotation matrices uniform on SO(3).

    Arvo's construction: a random rotation about the pole followed by a
    Householder reflection that moves the pole to a uniform point, negated
    to restore det = +1.
    """
    uniforms = np.atleast_2d(np.asarray(uniforms, dtype=np.float64))
    theta = 2.0 * math.pi * uniforms[:, 0]
    phi = 2.0 * math.pi * uniforms[:, 1]
    z = uniforms[:, 2]

    count = uniforms.shape[0]
    about_pole = np.zeros((count, 3, 3))
    about_pole[:, 0, 0] = np.cos(theta)
    about_pole[:, 0, 1] = np.sin(theta)
    about_pole[:, 1, 0] = -np.sin(theta)
    about_pole[:, 1, 1] = np.cos(theta)
    about_pole[:, 2, 2] = 1.0

    v = np.stack(
        [np.cos(phi) * np.sqrt(z), np.sin(phi) * np.sqrt(z), np.sqrt(1.0 - z)], axis=-1
    )
    householder = np.eye(3)[None] - 2.0 * v[:, :, None] * v[:, None, :]
    return -householder @ about_pole


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Draw one rotation uniformly from SO(3)."""
    return arvo_rotations(rng.random((1, 3)))[0]


def rotation_stream(seed: int, iteration: int) -> np.random.Generator:
    """Counter-based stream keyed on (seed, iteration).

    Consumers draw one triple per ray in ray-index order, so ray ``r`` always
    gets the ``r``-th triple of the stream regardless of batch size.
    """
    if not 0 <= seed <= U64_MAX:
        raise ConfigError(f"rotation seed must be in [0, 2**64), got {seed}")
    key = np.array([seed, iteration & U64_MAX], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True)
class SampleSphere:
    """Lattice directions, shell radii and the rotation applied to both."""

    directions: np.ndarray
    radii: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))

    @property
    def n_samples(self) -> int:
        return self.directions.shape[0]

    @property
    def unit_directions(self) -> np.ndarray:
        """Rotated unit directions (the p-hat samples)."""
        return self.directions @ self.rotation.T

    @property
    def points(self) -> np.ndarray:
        """Rotated ball points (the p samples)."""
        return (self.directions * self.radii[:, None]) @ self.rotation.T

    def with_rotation(self, rotation: np.ndarray) -> "SampleSphere":
        return SampleSphere(self.directions, self.radii, np.asarray(rotation, dtype=np.float64))


class SphereSampler:
    """Precomputed lattice shared by every regularisation step."""

    def __init__(self, config: LatticeConfig = None):
        self.config = config or LatticeConfig()
        directions = fibonacci_sphere(self.config.n_samples)
        directions.setflags(write=False)
        radii = shell_radii(self.config.n_samples)
        radii.setflags(write=False)
        self.sphere = SampleSphere(directions, radii)

    def rotations(self, iteration: int, n_rays: int) -> np.ndarray:
        """One rotation per ray for the given iteration, shape (n_rays, 3, 3)."""
        rng = rotation_stream(self.config.seed, iteration)
        return arvo_rotations(rng.random((n_rays, 3)))

    def rotated(self, iteration: int, n_rays: int) -> Tuple[np.ndarray, np.ndarray]:
        """Per-ray rotated directions and ball points, each (n_rays, N, 3)."""
        rotations = self.rotations(iteration, n_rays)
        directions = np.einsum("nk,rjk->rnj", self.sphere.directions, rotations)
        points = directions * self.sphere.radii[None, :, None]
        return directions, points

    def for_ray(self, iteration: int, ray_index: int) -> SampleSphere:
        """The rotated sphere used by a single ray."""
        rotation = self.rotations(iteration, ray_index + 1)[ray_index]
        return self.sphere.with_rotation(rotation)
