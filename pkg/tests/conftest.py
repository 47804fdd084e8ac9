"""Shared fixtures: tiny architectures, short schedules, float64 helpers."""

import os

import numpy as np
import pytest
import torch

from ddmm.denoiser import Arch
from ddmm.schedule import make_cosine_schedule
from ddmm.trainer import DdmmModel


def pytest_collection_modifyitems(config, items):
    if os.environ.get("DDMM_ACCEPTANCE") == "1":
        return
    skip = pytest.mark.skip(reason="set DDMM_ACCEPTANCE=1 to run acceptance runs")
    for item in items:
        if "acceptance" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(autouse=True)
def _deterministic_torch():
    torch.use_deterministic_algorithms(True)
    yield


@pytest.fixture
def tiny_arch():
    return Arch(base_channels=8, depth=1, time_embed_dim=8)


@pytest.fixture
def short_schedule():
    return make_cosine_schedule(10)


@pytest.fixture
def tiny_model(tiny_arch, short_schedule):
    return DdmmModel.create(tiny_arch, short_schedule, size=8, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def randn(rng, *shape):
    """float64 standard-normal tensor."""
    return torch.from_numpy(rng.standard_normal(shape))
