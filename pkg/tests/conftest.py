import numpy as np
import pytest

try:
    from threadpoolctl import threadpool_limits
    threadpool_limits(limits=1)  # deterministic, and faster at these sizes
except ImportError:
    pass


@pytest.fixture
def rng():
    return np.random.default_rng(42)
