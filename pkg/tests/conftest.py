import numpy as np
import pytest

from dedetr.selftest import tiny_config as build_tiny_config


@pytest.fixture
def tiny_config():
    return build_tiny_config()


@pytest.fixture
def tiny_spec(tiny_config):
    return tiny_config.data.scene


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
