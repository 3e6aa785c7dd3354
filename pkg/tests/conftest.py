import numpy as np
import pytest
from scipy.stats import ortho_group

RUNNING = np.array([[0.5, 0.2, 0.2], [0.2, 0.5, 0.2], [0.2, 0.2, 0.5]])


def random_kernel(d, rng, lo=0.05, hi=0.95, min_abs=0.0):
    """Haar-rotated spectrum in (lo, hi); redrawn until every entry exceeds ``min_abs``."""
    while True:
        V = ortho_group.rvs(d, random_state=rng) if d > 1 else np.ones((1, 1))
        lam = rng.uniform(lo, hi, size=d)
        K = (V * lam) @ V.T
        K = (K + K.T) / 2
        if np.min(np.abs(K)) > min_abs:
            return K


def random_signs(d, rng):
    return np.where(rng.random(d) < 0.5, -1.0, 1.0)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def running():
    return RUNNING.copy()
