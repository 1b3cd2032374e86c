import numpy as np
import pytest

from abcforest.model import Dataset


@pytest.fixture
def grid_data():
    """Ten rows on a regular grid, two predictors."""
    x1 = np.arange(10) / 10 + 0.05
    x2 = ((np.arange(10) * 7) % 10) / 10 + 0.05
    return Dataset(np.column_stack([x1, x2]), np.arange(10, dtype=float))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
