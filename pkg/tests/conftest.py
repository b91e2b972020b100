import numpy as np
import pytest

from ear3d import _accel


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=["numba", "numpy"])
def each_backend(request):
    """Run the test once per kernel backend, restoring the original afterwards."""
    if request.param == "numba" and not _accel.HAVE_NUMBA:
        pytest.skip("numba not importable")
    prev = _accel.set_backend(request.param)
    yield request.param
    _accel.set_backend(prev)
