import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("suite", max_examples=40, deadline=None, derandomize=True,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("suite")

from ballistic_ot import LagrangianModel, SpaceGrid  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def grid257():
    return SpaceGrid(-4.0, 4.0, 257)


@pytest.fixture(scope="session")
def grid513():
    return SpaceGrid(-4.0, 4.0, 513)


@pytest.fixture(scope="session")
def quad257(grid257):
    return LagrangianModel.quadratic(grid257, 1.0)
