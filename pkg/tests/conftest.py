import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def ar1_rows(rng, n, q, phi1, sigma=1.0):
    """Stationary AR(1) rows, same convention as the simulator."""
    E = np.empty((n, q))
    E[:, 0] = rng.normal(scale=sigma / np.sqrt(1.0 - phi1**2), size=n)
    for t in range(1, q):
        E[:, t] = phi1 * E[:, t - 1] + rng.normal(scale=sigma, size=n)
    return E


def ar1_covariance(phi1, q, sigma=1.0):
    """Analytic AR(1) covariance: sigma^2 phi^|j-k| / (1 - phi^2)."""
    idx = np.arange(q)
    return sigma**2 * phi1 ** np.abs(idx[:, None] - idx[None, :]) / (1.0 - phi1**2)


def random_indicator(rng, n, p):
    """Random one-way design with every level represented."""
    lv = rng.integers(0, p, size=n)
    lv[:p] = np.arange(p)
    X = np.zeros((n, p))
    X[np.arange(n), lv] = 1.0
    return X
