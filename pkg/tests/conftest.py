"""Shared fixtures: a small rendered manifest and a tiny model config.

Heavy end-to-end fixtures live in test_acceptance.py; everything here is
cheap enough to build once per session without caching.
"""

import numpy as np
import pytest

from flowgen import ModelConfig, build_manifest
from flowgen.util import spawn_rng


@pytest.fixture(scope="session")
def small_manifest(tmp_path_factory):
    root = tmp_path_factory.mktemp("small-data")
    return build_manifest(48, seed=7, out_dir=root, resolution=32)


@pytest.fixture(scope="session")
def tiny_model_config():
    return ModelConfig(patch_size=4, d_model=32, n_layers=2, n_heads=4,
                       d_text=32, max_patches=64)


@pytest.fixture()
def rng():
    return spawn_rng(0, "test")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running end-to-end checks")
