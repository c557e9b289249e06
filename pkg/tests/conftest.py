"""Test configuration and fixtures."""

from dataclasses import replace

import pytest
import torch

from surfreg.config import SceneConfig, TrainConfig
from surfreg.regularizers import LossWeights
from surfreg.schedule import CurriculumSchedule
from surfreg.trainer import TrainingData, build_field


def pytest_addoption(parser):
    parser.addoption(
        "--runslow", action="store_true", default=False, help="run desk-scale experiments"
    )


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale experiment, needs --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def tiny_scene():
    """Two small training views and one held-out view of the plane."""
    return SceneConfig(kind="plane", views=2, image_size=8, eval_views=1)


@pytest.fixture
def tiny_config():
    """Small field and batch so a step takes milliseconds."""
    return TrainConfig(
        learning_rate=0.01,
        lr_final=0.001,
        batch_size=32,
        seed=3,
        n_samples=8,
        samples_per_ray=12,
        knn_k=3,
        log_every=0,
        checkpoint_every=0,
        grid_resolution=8,
        color_resolution=4,
        feature_dim=4,
        hidden_dim=8,
        weights=LossWeights(),
        schedule=CurriculumSchedule(4, 2, 8),
    )


@pytest.fixture
def tiny_data(tiny_scene):
    return TrainingData.from_scene_config(tiny_scene, torch.float32)


@pytest.fixture
def tiny_data64(tiny_scene):
    return TrainingData.from_scene_config(tiny_scene, torch.float64)


def _perturbed_field(config, dtype):
    field = build_field(replace(config, dtype=dtype))
    generator = torch.Generator().manual_seed(config.seed)
    with torch.no_grad():
        for param in (field.density, field.diffuse, field.tint):
            noise = torch.randn(param.shape, generator=generator, dtype=torch.float64)
            param.add_(noise.to(param.dtype))
    return field


@pytest.fixture
def noisy_field(tiny_config):
    """Grid field with random density and colours, so rays have usable surface candidates."""
    return _perturbed_field(tiny_config, "float32")


@pytest.fixture
def noisy_field64(tiny_config):
    return _perturbed_field(tiny_config, "float64")
