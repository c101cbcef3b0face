import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def random_problem(rng, n=8, p=3, scale=1.0):
    """Small random classification instance with both classes present."""
    X = scale * rng.normal(size=(n, p))
    y = np.ones(n, dtype=np.int64)
    y[: n // 2] = -1
    rng.shuffle(y)
    if np.all(y == y[0]):  # pragma: no cover - n >= 2 guards this
        y[0] = -y[0]
    return X, y
