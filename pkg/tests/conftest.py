import os

# single-threaded BLAS so timings and reductions are reproducible
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from holomamba.tensor import precision  # noqa: E402


@pytest.fixture
def f64():
    with precision(64):
        yield


@pytest.fixture
def f32():
    with precision(32):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
