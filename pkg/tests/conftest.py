import numpy as np
import pytest

from yieldnet.tensor import SeededRng


@pytest.fixture
def rng():
    return SeededRng(1234)


@pytest.fixture
def nprng():
    return np.random.default_rng(0)
