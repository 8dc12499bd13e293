import numpy as np
import pytest

from rvae import kernels


@pytest.fixture(params=kernels.available())
def backend(request):
    """Run the test once per importable kernel implementation."""
    prev = kernels.use(request.param)
    yield request.param
    kernels.use(prev)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
