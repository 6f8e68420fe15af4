import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def stochastic(rng, *shape, power=1.0):
    a = rng.random(shape) ** power
    return a / a.sum(axis=-1, keepdims=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def fixture0():
    from vipseg.synthetic import planted_fixture

    return planted_fixture(0, n_images=6)


@pytest.fixture(params=["numpy", "cython"])
def impl(request):
    from vipseg import kernels

    found = kernels.implementations()
    if request.param not in found:
        pytest.skip("compiled kernels not built")
    return found[request.param]
