import os

import numpy as np
import pytest
import scipy.linalg
from hypothesis import HealthCheck, settings

from krylovexp import harness
from krylovexp.la_core import CsrMatrix

settings.register_profile("default", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

FULLSCALE = os.environ.get("KRYLOVEXP_FULLSCALE") == "1"

# filled by tests/test_acceptance.py, printed at the end of the session
ACCEPTANCE_LINES = []


def random_stable(n, rng, skew=1.0, spread=10.0):
    """Dense ``S + K`` with ``S`` symmetric positive definite and ``K`` skew: Re(eig) > 0."""
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    S = Q @ np.diag(rng.uniform(0.1, spread, n)) @ Q.T
    B = rng.standard_normal((n, n))
    return S + skew * (B - B.T) / np.sqrt(n)


def exact_affine(A, v, g, t):
    """Dense oracle ``v + t phi(-tA)(g - Av)`` from scipy's expm of an augmented matrix."""
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    aug = np.zeros((n + 1, n + 1))
    aug[:n, :n] = -t * A
    aug[:n, n] = t * (g - A @ v)
    return v + scipy.linalg.expm(aug)[:n, n]


def heat_chain(n):
    """1-D Laplacian ``tridiag(-1, 2, -1) * (n + 1)^2`` as a CsrMatrix."""
    main = 2.0 * np.ones(n)
    off = -np.ones(n - 1)
    D = (np.diag(main) + np.diag(off, 1) + np.diag(off, -1)) * (n + 1) ** 2
    return CsrMatrix.from_dense(D)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def op16():
    return harness.benchmark_operator(16)


@pytest.fixture(scope="session")
def op64():
    return harness.benchmark_operator(64)


@pytest.fixture(scope="session")
def problem1_64(op64):
    return harness.build_test1(op64)


@pytest.fixture(scope="session")
def problem2_64(op64):
    return harness.build_test2(op64)


@pytest.fixture(scope="session")
def problem1_16(op16):
    return harness.build_test1(op16)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
