import numpy as np
import pytest

from linkfit.data import LinkedDataset


def poisson_data(n=200, beta=(0.5, 0.8), seed=0, z=False):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 2, n)
    X = np.column_stack([np.ones(n), x])
    y = rng.poisson(np.exp(X @ np.array(beta))).astype(float)
    Z = rng.normal(size=(n, 1)) if z else None
    return LinkedDataset(X, y, "poisson", z=Z, x_names=("(Intercept)", "x"))


def gaussian_data(n=100, beta=(1.0, 2.0), sigma=0.5, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=n)
    X = np.column_stack([np.ones(n), x])
    y = X @ np.array(beta) + sigma * rng.normal(size=n)
    return LinkedDataset(X, y, "gaussian", x_names=("(Intercept)", "x"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
