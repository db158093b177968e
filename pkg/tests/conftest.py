import numpy as np
import pytest

from metaseird import EpiParams, EpsilonSet, TestParams, gravity_coupling
from metaseird.data import generate_synthetic, texas_regions

BASE_PARAMS = EpiParams(lambda_S=0.4, lambda_E=0.1, lambda_R=1 / 14, lambda_D=0.01)
BASE_TESTS = TestParams(alpha=0.01, beta=0.85, zeta=10 / 3, eps4=0.2)
BASE_EPS = EpsilonSet.from_tests(0.03, 0.1, BASE_TESTS)


@pytest.fixture
def params():
    return BASE_PARAMS


@pytest.fixture
def tests_():
    return BASE_TESTS


@pytest.fixture
def eps():
    return BASE_EPS


@pytest.fixture(scope="session")
def texas():
    return texas_regions()


@pytest.fixture(scope="session")
def texas_run(texas):
    """200-day eleven-region synthetic run, five infectives seeded in region 0."""
    coupling = gravity_coupling(texas)
    seeds = np.zeros(len(texas), dtype=np.int64)
    seeds[0] = 5
    truth, series = generate_synthetic(texas, BASE_PARAMS, BASE_TESTS, BASE_EPS, 200, 1, seeds, coupling)
    return truth, series, coupling
