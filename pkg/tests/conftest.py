import numpy as np
import pytest

from dulda.phantom import simulate_dataset
from dulda.projector import GridSpec, SinogramSpec, build_system_model


@pytest.fixture(scope="session")
def default_model():
    return build_system_model(GridSpec(64), SinogramSpec(90, 96))


@pytest.fixture(scope="session")
def small_model():
    return build_system_model(GridSpec(16), SinogramSpec(24, 24))


@pytest.fixture(scope="session")
def mid_model():
    return build_system_model(GridSpec(32), SinogramSpec(40, 48))


@pytest.fixture(scope="session")
def small_sample(small_model):
    return simulate_dataset(1, small_model, seed=3)[0]


@pytest.fixture(scope="session")
def default_samples(default_model):
    return simulate_dataset(3, default_model, seed=5)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
