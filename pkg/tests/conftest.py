import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from multilevel_boot.model import GroupedDataset  # noqa: E402


def random_slope_data(n, J, seed, sizes=None, Sigma=((2.0, 0.5), (0.5, 2.0)), s2=2.0):
    rng = np.random.default_rng(seed)
    sizes = np.full(J, n) if sizes is None else np.asarray(sizes)
    N = int(sizes.sum())
    x = rng.standard_normal(N)
    U = np.repeat(rng.multivariate_normal([0, 0], Sigma, size=len(sizes)), sizes, axis=0)
    y = 3 + U[:, 0] + (5 + U[:, 1]) * x + rng.normal(0, np.sqrt(s2), N)
    X = np.column_stack([np.ones(N), x])
    return GroupedDataset(y, X, X, sizes)


def random_intercept_data(n, J, seed, s2u=2.0, s2=1.0):
    rng = np.random.default_rng(seed)
    N = n * J
    u = np.repeat(rng.normal(0, np.sqrt(s2u), J), n)
    y = 1.5 + u + rng.normal(0, np.sqrt(s2), N)
    ones = np.ones((N, 1))
    return GroupedDataset(y, ones, ones, [n] * J)


@pytest.fixture
def slope_ds():
    return random_slope_data(10, 20, seed=11)


@pytest.fixture
def perfect_ds():
    rng = np.random.default_rng(3)
    x = rng.standard_normal(24)
    X = np.column_stack([np.ones(24), x])
    return GroupedDataset(2.0 + 0.5 * x, X, X[:, :1], [6, 6, 6, 6])
