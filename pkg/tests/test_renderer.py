"""Tests for volume rendering and surface selection."""

import math
import unittest
from dataclasses import replace

import torch

from surfreg.field import FieldOutput, RadianceField
from surfreg.geometry import Ray, conical_gaussian
from surfreg.renderer import (
    RaySamples,
    lower_median,
    render_ray,
    render_view,
    sample_rays,
    select_surface,
)
from surfreg.scene import AnalyticField, AnalyticScene, Camera

DTYPE = torch.float64


class ConstantField(RadianceField):
    """Uniform density and colour inside the unit box."""

    def __init__(self, tau: float, color=(0.2, 0.4, 0.6)):
        self.tau = tau
        self.color = torch.tensor(color, dtype=DTYPE)
        self.bbox_min = -torch.ones(3, dtype=DTYPE)
        self.bbox_max = torch.ones(3, dtype=DTYPE)

    def geometry(self, positions):
        shape = positions.shape[:-1]
        normal = torch.zeros_like(positions)
        normal[..., 2] = 1.0
        return FieldOutput(
            tau=torch.full(shape, self.tau, dtype=DTYPE),
            normal=normal,
            degenerate=torch.zeros(shape, dtype=torch.bool),
        )

    def query_points(self, positions, directions, covariances=None):
        out = self.geometry(positions)
        out.c_d = self.color.expand(positions.shape)
        out.tint = torch.zeros_like(positions)
        out.c_s = torch.zeros_like(positions)
        return out


def _axis_ray() -> Ray:
    return Ray([0.0, 0.0, -3.0], [0.0, 0.0, 1.0], 0.001)


def _samples_from_weights(weights) -> tuple:
    """Samples on unit intervals along +z with the rendered weights replaced by ``weights``."""
    weights = torch.tensor(weights, dtype=DTYPE)
    batch, k = weights.shape[:-1], weights.shape[-1]
    t = (torch.arange(k + 1, dtype=DTYPE) + 1.0).expand(batch + (k + 1,))
    direction = torch.tensor([0.0, 0.0, 1.0], dtype=DTYPE).expand(batch + (3,))
    ray = Ray(torch.zeros_like(direction), direction, torch.full(batch, 0.01, dtype=DTYPE))
    gaussians = conical_gaussian(ray, t[..., :-1], t[..., 1:])
    normal = torch.zeros(batch + (k, 3), dtype=DTYPE)
    normal[..., 2] = 1.0
    outputs = FieldOutput(
        tau=torch.zeros(batch + (k,), dtype=DTYPE),
        normal=normal,
        degenerate=torch.zeros(batch + (k,), dtype=torch.bool),
    )
    samples = RaySamples(t=t, gaussians=gaussians, outputs=outputs)
    return samples, replace(render_ray(samples), weights=weights)


class TestRenderRay(unittest.TestCase):

    def test_vacuum(self):
        samples, _ = sample_rays(ConstantField(0.0), _axis_ray(), 32)
        result = render_ray(samples)
        self.assertEqual(float(result.accumulation), 0.0)
        self.assertEqual(float(result.transmittance), 1.0)
        self.assertTrue(bool((result.color == 0).all()))

    def test_opaque_limit(self):
        field = ConstantField(1e6)
        samples, hit = sample_rays(field, _axis_ray(), 64)
        result = render_ray(samples)
        self.assertTrue(bool(hit))
        self.assertAlmostEqual(float(result.accumulation), 1.0, places=12)
        self.assertAlmostEqual(float(result.weights[0]), 1.0, places=12)
        torch.testing.assert_close(result.color, field.color)

    def test_constant_density_closed_form(self):
        tau = 1.3
        samples, _ = sample_rays(ConstantField(tau), _axis_ray(), 256)
        result = render_ray(samples)
        length = 2.0
        self.assertAlmostEqual(float(result.accumulation), 1 - math.exp(-tau * length), places=10)
        near = 2.0
        expected_depth = near + 1 / tau - length * math.exp(-tau * length) / (1 - math.exp(-tau * length))
        self.assertAlmostEqual(float(result.depth), expected_depth, delta=1e-3)

    def test_weights_and_transmittance_partition_unity(self):
        generator = torch.Generator().manual_seed(0)
        for _ in range(5):
            k = 17
            t = torch.cumsum(torch.rand(k + 1, generator=generator, dtype=DTYPE), 0) + 0.5
            tau = torch.rand(k, generator=generator, dtype=DTYPE) * 5
            normal = torch.zeros(k, 3, dtype=DTYPE)
            outputs = FieldOutput(tau=tau, normal=normal, degenerate=torch.zeros(k, dtype=torch.bool))
            result = render_ray(RaySamples(t=t, gaussians=None, outputs=outputs))
            self.assertAlmostEqual(float(result.weights.sum() + result.transmittance), 1.0, places=12)
            self.assertTrue(bool((result.weights >= 0).all()))

    def test_ray_missing_box_is_empty(self):
        ray = Ray([0.0, 0.0, -3.0], [1.0, 0.0, 0.0], 0.001)
        samples, hit = sample_rays(ConstantField(5.0), ray, 16)
        self.assertFalse(bool(hit))
        self.assertEqual(float(render_ray(samples).accumulation), 0.0)


class TestSelectSurface(unittest.TestCase):

    def test_first_interval_above_median(self):
        samples, result = _samples_from_weights([0.05, 0.1, 0.5, 0.3, 0.05])
        candidate = select_surface(samples, result)
        self.assertEqual(int(candidate.index), 2)
        self.assertAlmostEqual(float(candidate.w_star), 0.5, places=12)
        torch.testing.assert_close(candidate.x_star, samples.gaussians.mean3[2])

    def test_equal_weights_have_no_surface(self):
        samples, result = _samples_from_weights([0.2, 0.2, 0.2, 0.2])
        self.assertIsNone(select_surface(samples, result))

    def test_front_loaded_weights(self):
        samples, result = _samples_from_weights([0.6, 0.2, 0.1, 0.05, 0.05])
        self.assertEqual(int(select_surface(samples, result).index), 0)

    def test_lower_median_for_even_length(self):
        weights = torch.tensor([0.4, 0.1, 0.3, 0.2], dtype=DTYPE)
        self.assertAlmostEqual(float(lower_median(weights)), 0.2)

    def test_median_ignores_a_far_floater(self):
        clean, clean_result = _samples_from_weights([0.001, 0.002, 0.5, 0.2, 0.05, 0.04, 0.03, 0.02])
        noisy, noisy_result = _samples_from_weights([0.001, 0.002, 0.5, 0.2, 0.05, 0.04, 0.03, 0.1])
        self.assertEqual(int(select_surface(clean, clean_result).index), 2)
        self.assertEqual(int(select_surface(noisy, noisy_result).index), 2)

    def test_batched_selection_marks_invalid_rays(self):
        samples, result = _samples_from_weights([[0.05, 0.1, 0.5, 0.3, 0.05], [0.1, 0.1, 0.1, 0.1, 0.1]])
        candidate = select_surface(samples, result)
        self.assertEqual(candidate.valid.tolist(), [True, False])
        self.assertEqual(int(candidate.index[0]), 2)
        self.assertEqual(tuple(candidate.cov_star.shape), (2, 3, 3))


class TestRenderView(unittest.TestCase):

    def test_plane_renders_its_normal_and_depth(self):
        scene = AnalyticScene.from_name("plane", ridge_width=0.01, peak_density=400.0)
        camera = Camera(position=(0.0, 0.0, 3.0), up=(0.0, 1.0, 0.0))
        view = render_view(AnalyticField(scene), camera, 4, 4, n_intervals=256)
        self.assertEqual(view.image.shape, (4, 4, 3))
        centre = view.accumulation > 0.5
        self.assertTrue(centre.any())
        self.assertTrue(((view.normal[centre][:, 2]) > 0.99).all())
        self.assertTrue((abs(view.median_depth[centre] - 3.0) < 0.1).all())
