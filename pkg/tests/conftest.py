import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from hierda import _kernels

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

BACKENDS = ["numpy"] + (["numba"] if _kernels.NUMBA_AVAILABLE else [])


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(params=BACKENDS)
def backend(request):
    return request.param
