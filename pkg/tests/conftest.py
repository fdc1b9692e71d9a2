import os
import sys

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def planted_result():
    from helpers import planted
    return planted()


@pytest.fixture(scope="session")
def small_result():
    from helpers import planted
    return planted(n_students=200, seed=3)


@pytest.fixture(scope="session")
def planted_matrix(planted_result):
    from helpers import pipeline_matrix
    return pipeline_matrix(planted_result)
