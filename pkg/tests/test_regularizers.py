"""Tests for the regularisation batches and the four surface losses."""

import math
import unittest
from dataclasses import replace

import numpy as np
import pytest
import torch

from surfreg.errors import ConfigError, GeometryError
from surfreg.field import GridField
from surfreg.geometry import Ray
from surfreg.gradcheck import compare_gradients
from surfreg.regularizers import (
    HALF_MAX_SCALE,
    LossWeights,
    RegBatch,
    RegularizerSettings,
    SurfaceCandidate,
    bias_denominator,
    build_directional_batch,
    build_reg_batch,
    build_spatial_batch,
    knn_indices,
    loss_density,
    loss_normal,
    loss_specular_bias,
    loss_sphere_tv,
    total_regularization,
)
from surfreg.scene import AnalyticField, AnalyticScene
from surfreg.sphere import LatticeConfig, SphereSampler, random_rotation, rotation_stream

DTYPE = torch.float64
Z = torch.tensor([0.0, 0.0, 1.0], dtype=DTYPE)


def _t(values) -> torch.Tensor:
    return torch.as_tensor(values, dtype=DTYPE)


def _candidate(x_star=(0.0, 0.0, 0.0), n_star=(0.0, 0.0, 1.0), w_star=1.0, sigma_r=0.1) -> SurfaceCandidate:
    return SurfaceCandidate(
        x_star=_t(x_star),
        n_star=_t(n_star),
        w_star=_t(w_star),
        cov_star=(sigma_r**2) * torch.eye(3, dtype=DTYPE),
        sigma_r_star=_t(sigma_r),
    )


def _spatial(cand, offsets, tau, normals=None) -> RegBatch:
    offsets = _t(offsets)
    x_m = cand.x_star + offsets
    if normals is None:
        normals = cand.n_star.expand(offsets.shape)
    d = torch.nn.functional.normalize(offsets, dim=-1)
    return RegBatch(
        x_m=x_m,
        d_m=d,
        x_phi=cand.x_star,
        d_phi=d,
        tau=_t(tau),
        normals=_t(normals),
        degenerate=torch.zeros(offsets.shape[:-1], dtype=torch.bool),
    )


def _unit_rows(n: int, generator: torch.Generator) -> torch.Tensor:
    return torch.nn.functional.normalize(torch.randn(n, 3, generator=generator, dtype=DTYPE), dim=-1)


def _brute_force_tv(d: np.ndarray, c: np.ndarray, k: int) -> float:
    total = 0.0
    n = d.shape[0]
    for j in range(n):
        others = sorted((-float(d[j] @ d[m]), m) for m in range(n) if m != j)
        for _, m in others[:k]:
            total += 0.5 * (float(d[j] @ d[m]) + 1.0) * float(np.abs(c[j] - c[m]).sum())
    return total


class TestBatches(unittest.TestCase):

    def test_directional_batch_flips_into_normal_hemisphere(self):
        cand = _candidate(n_star=(0.0, 0.0, 1.0))
        directions = _t([[0.0, 0.0, 1.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0], [0.6, 0.0, -0.8]])
        x_phi, d_phi = build_directional_batch(cand, (directions, directions))
        torch.testing.assert_close(x_phi, cand.x_star)
        torch.testing.assert_close(d_phi[0], Z)
        torch.testing.assert_close(d_phi[1], Z)
        torch.testing.assert_close(d_phi[2], _t([1.0, 0.0, 0.0]))
        torch.testing.assert_close(d_phi[3], _t([-0.6, 0.0, 0.8]))

    def test_directional_batch_of_rotated_lattice(self):
        cand = _candidate(n_star=torch.nn.functional.normalize(_t([0.3, -0.4, 0.5]), dim=0).tolist())
        sphere = SphereSampler(LatticeConfig(32, seed=2)).for_ray(4, 0)
        _, d_phi = build_directional_batch(cand, sphere)
        self.assertTrue(bool(((d_phi @ cand.n_star) >= 0).all()))
        torch.testing.assert_close(d_phi.norm(dim=-1), torch.ones(32, dtype=DTYPE))

    def test_spatial_batch_radius(self):
        cand = _candidate(sigma_r=1.0)
        points = _t([[0.0, 0.0, 1.0]])
        x_m, d_m = build_spatial_batch(cand, (points, points))
        torch.testing.assert_close(x_m[0], _t([0.0, 0.0, 1.17741]), atol=1e-5, rtol=0)
        self.assertAlmostEqual(HALF_MAX_SCALE, 1.1774100225154747, places=12)
        torch.testing.assert_close(d_m, points)

    def test_spatial_batch_degenerate_radius(self):
        cand = _candidate(x_star=(0.2, 0.1, -0.3), sigma_r=0.0)
        sphere = SphereSampler(LatticeConfig(16)).for_ray(0, 0)
        x_m, _ = build_spatial_batch(cand, sphere)
        torch.testing.assert_close(x_m, cand.x_star.expand(16, 3))

    def test_spatial_batch_stays_in_half_max_ball(self):
        cand = _candidate(sigma_r=0.05)
        sphere = SphereSampler(LatticeConfig(32, seed=9)).for_ray(1, 3)
        x_m, _ = build_spatial_batch(cand, sphere)
        self.assertTrue(bool(((x_m - cand.x_star).norm(dim=-1) <= 0.05 * HALF_MAX_SCALE + 1e-12).all()))

    def test_virtual_rays_arrive_from_the_viewer_side(self):
        scene = AnalyticScene.from_name("plane")
        field = AnalyticField(scene)
        cand = _candidate(x_star=(0.0, 0.0, 0.0), sigma_r=0.05)
        origin = _t([0.3, -0.2, 2.0])
        ray = Ray(origin, -origin / origin.norm(), _t(0.01))
        sphere = SphereSampler(LatticeConfig(16, seed=4)).for_ray(0, 0)
        batch = build_reg_batch(field, cand, sphere, ray)
        virtual = batch.virtual
        torch.testing.assert_close(virtual.directions, -batch.d_phi)
        offsets = virtual.origins - cand.x_star
        distance = (ray.origin - cand.x_star).norm()
        torch.testing.assert_close(offsets, distance * batch.d_phi, atol=1e-12, rtol=0)


class TestDensityLoss(unittest.TestCase):

    def test_single_sample_along_normal(self):
        cand = _candidate(w_star=0.5)
        batch = _spatial(cand, [[0.0, 0.0, 0.05]], [math.log(2.0)])
        self.assertAlmostEqual(float(loss_density(cand, batch, 0.1)), 0.025, places=12)

    def test_empty_space_costs_nothing(self):
        cand = _candidate()
        batch = _spatial(cand, [[0.0, 0.0, 0.05], [0.03, 0.0, 0.02]], [0.0, 0.0])
        self.assertEqual(float(loss_density(cand, batch, 0.1)), 0.0)

    def test_tangent_samples_cost_nothing(self):
        cand = _candidate()
        batch = _spatial(cand, [[0.05, 0.0, 0.0], [0.0, -0.02, 0.0]], [100.0, 5.0])
        self.assertEqual(float(loss_density(cand, batch, 0.1)), 0.0)

    def test_coincident_sample_costs_nothing(self):
        cand = _candidate()
        batch = _spatial(cand, [[0.0, 0.0, 0.0]], [100.0])
        batch.x_m = cand.x_star[None].clone()
        self.assertEqual(float(loss_density(cand, batch, 0.1)), 0.0)


class TestNormalLoss(unittest.TestCase):

    def test_parallel_normals_cost_nothing(self):
        cand = _candidate()
        batch = _spatial(cand, [[0.0, 0.0, 0.05], [0.02, 0.0, 0.0]], [3.0, 3.0])
        self.assertEqual(float(loss_normal(cand, batch, 0.1)), 0.0)

    def test_antiparallel_opaque_sample(self):
        cand = _candidate(w_star=1.0)
        batch = _spatial(cand, [[0.0, 0.0, 0.05]], [1e3], normals=[[0.0, 0.0, -1.0]])
        self.assertAlmostEqual(float(loss_normal(cand, batch, 0.1)), 0.1, places=12)

    def test_perpendicular_sample(self):
        cand = _candidate(w_star=1.0)
        batch = _spatial(cand, [[0.0, 0.0, 0.05]], [math.log(2.0)], normals=[[1.0, 0.0, 0.0]])
        self.assertAlmostEqual(float(loss_normal(cand, batch, 1.0)), 0.25, places=12)

    def test_degenerate_sample_normals_are_skipped(self):
        cand = _candidate()
        batch = _spatial(cand, [[0.0, 0.0, 0.05]], [10.0], normals=[[0.0, 0.0, 0.0]])
        batch.degenerate = torch.tensor([True])
        self.assertEqual(float(loss_normal(cand, batch, 0.1)), 0.0)


class TestSpecularBiasLoss(unittest.TestCase):

    def test_no_specular_signal(self):
        cand = _candidate()
        self.assertEqual(float(loss_specular_bias(cand, torch.zeros(8, 3, dtype=DTYPE), 0.03)), 0.0)

    def test_uniform_specular_is_maximal(self):
        cand = _candidate(w_star=1.0)
        c_s = _t([0.2, 0.5, 0.1]).expand(8, 3)
        self.assertAlmostEqual(float(loss_specular_bias(cand, c_s, 0.03)), 0.03 * 8, places=12)

    def test_single_bright_direction_costs_one_unit(self):
        cand = _candidate(w_star=0.7)
        c_s = torch.zeros(8, 3, dtype=DTYPE)
        c_s[5] = _t([0.3, 0.6, 0.9])
        self.assertAlmostEqual(float(loss_specular_bias(cand, c_s, 0.03)), 0.03 * 0.7, places=12)

    def test_sample_norm_denominator(self):
        c_s = _t([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        self.assertAlmostEqual(float(bias_denominator(c_s, "channel_max")), math.sqrt(2.0), places=12)
        self.assertAlmostEqual(float(bias_denominator(c_s, "sample_norm")), 1.0, places=12)
        with self.assertRaises(ConfigError):
            bias_denominator(c_s, "median")

    def test_denominator_carries_no_gradient(self):
        generator = torch.Generator().manual_seed(1)
        c_s = torch.rand(16, 3, generator=generator, dtype=DTYPE).requires_grad_(True)
        cand = _candidate(w_star=0.8)
        frozen = bias_denominator(c_s)
        self.assertFalse(frozen.requires_grad)

        (free_grad,) = torch.autograd.grad(loss_specular_bias(cand, c_s, 0.03), c_s)
        (frozen_grad,) = torch.autograd.grad(loss_specular_bias(cand, c_s, 0.03, denominator=frozen), c_s)
        self.assertTrue(torch.equal(free_grad, frozen_grad))

        comparison = compare_gradients(
            lambda: loss_specular_bias(cand, c_s, 0.03, denominator=frozen), c_s, indices=range(48)
        )
        self.assertLess(comparison.max_relative_error, 1e-6)


class TestSphereTV(unittest.TestCase):

    def test_uniform_colour_has_no_variation(self):
        generator = torch.Generator().manual_seed(2)
        d = _unit_rows(12, generator)
        c = _t([0.4, 0.1, 0.7]).expand(12, 3)
        self.assertEqual(float(loss_sphere_tv(d, c, 3, _candidate(), 1.0)), 0.0)

    def test_antipodal_edge_has_zero_weight(self):
        d = _t([[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]])
        c = _t([[1.0, 1.0, 1.0], [0.0, 0.0, 0.0]])
        self.assertEqual(float(loss_sphere_tv(d, c, 1, _candidate(), 1.0)), 0.0)

    def test_three_orthogonal_directions(self):
        d = torch.eye(3, dtype=DTYPE)
        c = _t([[1.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
        neighbours, _ = knn_indices(d, 1)
        self.assertEqual(neighbours[:, 0].tolist(), [1, 0, 0])
        self.assertAlmostEqual(float(loss_sphere_tv(d, c, 1, _candidate(), 1.0)), 1.5, places=12)

    def test_matches_brute_force_oracle(self):
        generator = torch.Generator().manual_seed(3)
        rng = np.random.default_rng(3)
        for _ in range(50):
            n = int(rng.integers(5, 17))
            k = int(rng.integers(1, min(4, n - 1) + 1))
            d = _unit_rows(n, generator)
            c = torch.rand(n, 3, generator=generator, dtype=DTYPE)
            value = float(loss_sphere_tv(d, c, k, _candidate(), 1.0))
            self.assertAlmostEqual(value, _brute_force_tv(d.numpy(), c.numpy(), k), delta=1e-10)

    def test_permutation_invariance(self):
        generator = torch.Generator().manual_seed(4)
        d = _unit_rows(16, generator)
        c = torch.rand(16, 3, generator=generator, dtype=DTYPE)
        perm = torch.randperm(16, generator=generator)
        original = loss_sphere_tv(d, c, 3, _candidate(), 0.001)
        permuted = loss_sphere_tv(d[perm], c[perm], 3, _candidate(), 0.001)
        self.assertAlmostEqual(float(original), float(permuted), places=14)

    def test_too_few_samples(self):
        with self.assertRaises(GeometryError):
            knn_indices(torch.eye(3, dtype=DTYPE), 3)


class TestLossProperties(unittest.TestCase):

    def setUp(self):
        generator = torch.Generator().manual_seed(5)
        self.generator = generator
        self.cand = _candidate(x_star=(0.1, -0.2, 0.3), n_star=_unit_rows(1, generator)[0].tolist(), w_star=0.6)
        offsets = 0.05 * torch.randn(16, 3, generator=generator, dtype=DTYPE)
        tau = 5 * torch.rand(16, generator=generator, dtype=DTYPE)
        normals = _unit_rows(16, generator)
        self.batch = _spatial(self.cand, offsets, tau, normals)
        self.batch.d_phi = _unit_rows(16, generator)
        self.batch.c_s = torch.rand(16, 3, generator=generator, dtype=DTYPE)

    def test_losses_are_non_negative(self):
        losses = total_regularization(self.cand, self.batch, LossWeights(), ray_count=1)
        for name, value in losses.as_dict().items():
            self.assertGreaterEqual(value, 0.0, name)

    def test_losses_scale_with_weights_and_w_star(self):
        base = total_regularization(self.cand, self.batch, LossWeights(), ray_count=1).as_dict()
        doubled = total_regularization(self.cand, self.batch, LossWeights().scaled(2.0), ray_count=1).as_dict()
        self.cand.w_star = self.cand.w_star / 2
        halved = total_regularization(self.cand, self.batch, LossWeights(), ray_count=1).as_dict()
        for name in base:
            self.assertAlmostEqual(doubled[name], 2 * base[name], places=12)
            self.assertAlmostEqual(halved[name], base[name] / 2, places=12)

    def test_zero_weights_give_zero_total(self):
        weights = LossWeights(0.0, 0.0, 0.0, 0.0)
        self.assertEqual(float(total_regularization(self.cand, self.batch, weights).total), 0.0)

    def test_geometry_losses_are_rotation_invariant(self):
        rotation = torch.as_tensor(random_rotation(rotation_stream(6, 0)), dtype=DTYPE)
        rotated_cand = _candidate(
            x_star=(rotation @ self.cand.x_star).tolist(),
            n_star=(rotation @ self.cand.n_star).tolist(),
            w_star=0.6,
        )
        rotated = RegBatch(
            x_m=self.batch.x_m @ rotation.T,
            d_m=self.batch.d_m @ rotation.T,
            x_phi=rotated_cand.x_star,
            d_phi=self.batch.d_phi @ rotation.T,
            tau=self.batch.tau,
            normals=self.batch.normals @ rotation.T,
            degenerate=self.batch.degenerate,
        )
        self.assertAlmostEqual(
            float(loss_density(self.cand, self.batch, 0.1)), float(loss_density(rotated_cand, rotated, 0.1)), places=12
        )
        self.assertAlmostEqual(
            float(loss_normal(self.cand, self.batch, 0.1)), float(loss_normal(rotated_cand, rotated, 0.1)), places=12
        )

    def test_unusable_rays_contribute_nothing_but_count(self):
        cand = SurfaceCandidate(
            x_star=self.cand.x_star.expand(2, 3),
            n_star=self.cand.n_star.expand(2, 3),
            w_star=_t([0.6, 0.6]),
            cov_star=self.cand.cov_star.expand(2, 3, 3),
            sigma_r_star=_t([0.1, 0.1]),
            valid=torch.tensor([True, False]),
        )
        batch = RegBatch(
            x_m=self.batch.x_m.expand(2, 16, 3),
            d_m=self.batch.d_m.expand(2, 16, 3),
            x_phi=cand.x_star,
            d_phi=self.batch.d_phi.expand(2, 16, 3),
            tau=self.batch.tau.expand(2, 16),
            normals=self.batch.normals.expand(2, 16, 3),
            degenerate=self.batch.degenerate.expand(2, 16),
            c_s=self.batch.c_s.expand(2, 16, 3),
        )
        single = total_regularization(self.cand, self.batch, LossWeights(), ray_count=1)
        pair = total_regularization(cand, batch, LossWeights(), ray_count=2)
        self.assertAlmostEqual(float(pair.total), float(single.total) / 2, places=12)
        self.assertEqual(float(pair.per_ray["L_n"][1]), 0.0)

    def test_bias_loss_switch(self):
        settings = RegularizerSettings(use_bias_loss=False)
        losses = total_regularization(self.cand, self.batch, LossWeights(), settings, ray_count=1)
        self.assertEqual(float(losses.L_b), 0.0)
        with self.assertRaises(ConfigError):
            RegularizerSettings(bias_denominator="mean")
        with self.assertRaises(ConfigError):
            RegularizerSettings(tv_target="diffuse")

    def test_color_target_needs_diffuse_colour(self):
        with self.assertRaises(ConfigError):
            total_regularization(self.cand, self.batch, LossWeights(), RegularizerSettings(tv_target="color"), ray_count=1)
        colored = replace(self.batch, color=self.batch.c_s + 0.25)
        shifted = total_regularization(self.cand, colored, LossWeights(), RegularizerSettings(tv_target="color"), ray_count=1)
        plain = total_regularization(self.cand, self.batch, LossWeights(), ray_count=1)
        self.assertAlmostEqual(float(shifted.L_s), float(plain.L_s), places=12)

    def test_gradient_reaches_candidate_normal(self):
        n_star = self.cand.n_star.clone().requires_grad_(True)
        self.cand.n_star = n_star
        total = total_regularization(self.cand, self.batch, LossWeights(), ray_count=1).total
        (grad,) = torch.autograd.grad(total, n_star)
        self.assertGreater(float(grad.norm()), 0.0)


class TestAnalyticOracle(unittest.TestCase):

    def test_plane_surface_has_no_geometry_penalty(self):
        scene = AnalyticScene.from_name("plane", ridge_width=1e-4)
        field = AnalyticField(scene)
        # lattice polar axis onto +z
        polar_to_z = np.array([[0.0, 0.0, -1.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]])
        sphere = SphereSampler(LatticeConfig(32)).sphere.with_rotation(polar_to_z)
        cand = _candidate(x_star=(0.05, -0.1, 0.0), w_star=0.9, sigma_r=0.1)
        batch = build_reg_batch(field, cand, sphere)
        losses = total_regularization(cand, batch, LossWeights(), ray_count=1)
        self.assertEqual(float(losses.L_n), 0.0)
        self.assertLess(float(losses.L_d + losses.L_n), 1e-3)
        self.assertGreaterEqual(float(losses.L_b), 0.0)

    def test_descent_flattens_a_noisy_ridge(self):
        res = 16
        field = GridField(grid_resolution=res, color_resolution=4, feature_dim=4, hidden_dim=8, dtype=DTYPE)
        scene = AnalyticScene.from_name("plane", ridge_width=0.1, peak_density=20.0)
        lin = torch.linspace(-1.0, 1.0, res, dtype=DTYPE)
        grid = torch.stack(torch.meshgrid(lin, lin, lin, indexing="ij"), dim=-1)
        tau = AnalyticField(scene).geometry(grid.reshape(-1, 3)).tau.reshape(res, res, res)
        generator = torch.Generator().manual_seed(7)
        noisy = tau + 0.3 * torch.randn(tau.shape, generator=generator, dtype=DTYPE)
        with torch.no_grad():
            field.density.copy_(torch.log(torch.expm1(noisy.clamp_min(1e-3)))[None])

        xy = (torch.rand(24, 2, generator=generator, dtype=DTYPE) - 0.5) * 1.0
        x_star = torch.cat([xy, torch.full((24, 1), 0.15, dtype=DTYPE)], dim=-1)
        sphere = SphereSampler(LatticeConfig(32, seed=7)).rotated(0, 24)

        def losses():
            geometry = field.geometry(x_star)
            cand = SurfaceCandidate(
                x_star=x_star,
                n_star=geometry.normal,
                w_star=torch.ones(24, dtype=DTYPE),
                cov_star=(0.15**2) * torch.eye(3, dtype=DTYPE).expand(24, 3, 3),
                sigma_r_star=torch.full((24,), 0.15, dtype=DTYPE),
                degenerate=geometry.degenerate,
            )
            x_m, d_m = build_spatial_batch(cand, sphere)
            spatial = field.geometry(x_m)
            batch = RegBatch(x_m, d_m, x_star, d_m, spatial.tau, spatial.normal, spatial.degenerate)
            weights = LossWeights()
            ray_count = 24
            l_d = loss_density(cand, batch, weights.lambda_d).sum() / ray_count
            l_n = loss_normal(cand, batch, weights.lambda_n).sum() / ray_count
            return l_d, l_n, geometry.normal

        def normal_mae(normal):
            cosine = (normal.detach() * Z).sum(-1).clamp(-1, 1)
            return float(torch.rad2deg(torch.arccos(cosine)).mean())

        start_d, start_n, start_normal = losses()
        optimizer = torch.optim.Adam([field.density], lr=5e-3)
        for _ in range(200):
            optimizer.zero_grad()
            l_d, l_n, _ = losses()
            (l_d + l_n).backward()
            optimizer.step()
        end_d, end_n, end_normal = losses()

        self.assertLess(float(end_d), float(start_d))
        self.assertLess(float(end_n), float(start_n))
        self.assertLess(normal_mae(end_normal), normal_mae(start_normal))


@pytest.mark.parametrize("name", ["lambda_d", "lambda_n", "lambda_b", "lambda_s"])
def test_weights_without_one_loss(name):
    weights = LossWeights().without(name)
    assert getattr(weights, name) == 0.0
    assert sum(getattr(weights, other) > 0 for other in ("lambda_d", "lambda_n", "lambda_b", "lambda_s")) == 3


def test_negative_weight_is_rejected():
    with pytest.raises(ConfigError):
        LossWeights(lambda_d=-0.1)
