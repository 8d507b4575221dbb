import numpy as np
import pytest

from pnunet import kernels, model, ops


@pytest.fixture(scope="session", autouse=True)
def _warm_kernels():
    # numba emits a one-time threading-layer warning when the first
    # parallel kernel launches; trigger it here so tests that trap
    # warnings see a quiet library.
    cfg = model.ReconstructorConfig(levels=2, base_channels=2, in_channels=1, seed=0)
    params = model.init_reconstructor(cfg)
    model.forward(params, np.zeros((8, 8, 1), dtype=np.float32))


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=ops.BACKENDS)
def backend(request):
    name = request.param
    if name == "numba" and not kernels.HAS_NUMBA:
        pytest.skip("numba not importable")
    with ops.use_backend(name):
        yield name
