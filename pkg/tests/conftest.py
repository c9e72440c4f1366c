import numpy as np
import pytest

from ipmo.core import AllocationPath, CovariancePath, ForecastPath, ProblemParams
from ipmo.triangle import backward_eta, random_instance, solved_instance  # noqa: F401  (re-exported for tests)


def identity_instance(y, delta=1.0):
    y = np.atleast_2d(np.asarray(y, dtype=float))
    h, n = y.shape
    params = ProblemParams(delta=delta, lam=0.0, horizon=h, n_assets=n)
    return params, ForecastPath(y), CovariancePath(np.broadcast_to(np.eye(n), (h, n, n)).copy())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def uniform_path(n, h):
    return AllocationPath.uniform(n, h)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
