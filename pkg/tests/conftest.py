import numpy as np
import pytest

from ablo.constants import DIVERGENCE_SETUP
from ablo.estimators import InnerSchedule
from ablo.problems import make_problem
from ablo.problems.counterexample import build_counterexample


@pytest.fixture
def divergence_spec():
    return build_counterexample(**DIVERGENCE_SETUP)


@pytest.fixture
def counterexample():
    return make_problem("counterexample", dict(DIVERGENCE_SETUP))


@pytest.fixture
def divergence_schedule():
    return InnerSchedule.constant(DIVERGENCE_SETUP["alpha"], DIVERGENCE_SETUP["r"])


@pytest.fixture
def quadratic():
    return make_problem("scalar_quadratic", {"w": 1.3, "v0": 0.7})


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
