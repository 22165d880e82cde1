import numba
import numpy as np
import pytest
from threadpoolctl import threadpool_limits

# Two cores in CI boxes; cap both pools once for the whole session so BLAS
# and the numba kernels do not fight over them.
_limits = threadpool_limits(limits=2)
numba.set_num_threads(min(2, numba.config.NUMBA_NUM_THREADS))


@pytest.fixture
def rng():
    return np.random.default_rng(0)
