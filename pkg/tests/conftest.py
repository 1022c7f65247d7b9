import numpy as np
import pytest

from shapinfer.core_data import Dataset


def linear_gaussian(n, coef=(1.0, 0.5, 0.0), noise_sd=0.5, seed=0, cov=None):
    """y = b.x + eps with X ~ N(0, cov) (identity by default)."""
    rng = np.random.default_rng(seed)
    coef = np.asarray(coef, dtype=float)
    x = rng.standard_normal((n, coef.size))
    if cov is not None:
        x = x @ np.linalg.cholesky(cov).T
    return Dataset(x, x @ coef + noise_sd * rng.standard_normal(n))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# one summary line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
