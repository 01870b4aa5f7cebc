import numpy as np
import pytest

from svmp.data import SparseRatings, generate_synthetic
from svmp.optimizer import init_state


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_data():
    """12 x 16, K = 2, dense enough that most factors have 2..8 children."""
    data, _ = generate_synthetic(12, 16, 2, 0.35, 1.0, seed=7)
    return data


@pytest.fixture(scope="session")
def mid_data():
    """The 50 x 80, K = 3, density 0.1 instance."""
    data, _ = generate_synthetic(50, 80, 3, 0.1, 1.0, seed=0)
    return data


@pytest.fixture(scope="session")
def desk_data():
    data, _ = generate_synthetic(200, 300, 5, 0.08, 1.0, seed=0)
    return data


@pytest.fixture
def tiny_data():
    """3 users, 4 items, 6 ratings."""
    return SparseRatings.from_triplets(
        [(0, 0, 1.5), (0, 2, -0.5), (1, 1, 2.0), (1, 3, 0.25), (2, 0, -1.0), (2, 3, 3.0)], 3, 4
    )


@pytest.fixture
def tiny_state():
    return init_state(3, 4, 2, seed=3, mean_sd=0.8)
