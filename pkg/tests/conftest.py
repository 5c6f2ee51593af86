import numpy as np
import pytest

from svrn.tensor_ops import set_verification_mode


@pytest.fixture
def verification_mode():
    """Run a test in 64-bit precision, restoring 32-bit afterwards."""
    set_verification_mode(True)
    yield
    set_verification_mode(False)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
