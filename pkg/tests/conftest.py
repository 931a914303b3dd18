import itertools

import numpy as np
import pytest

from qotlab.measures import DiscreteMeasure, normalized

# acceptance lines collected by tests/test_acceptance.py
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[key])


def random_measure(rng, n, d=1, low=0.0, high=1.0):
    pts = rng.uniform(low, high, size=(n, d))
    return DiscreteMeasure.from_arrays(pts, normalized(rng.uniform(0.2, 1.0, n)))


def vertex_enumeration_lp(a, b, cost):
    """Min <cost, pi> over the transportation polytope by enumerating basic solutions."""
    n, m = cost.shape
    A = np.zeros((n + m, n * m))
    for i in range(n):
        A[i, i * m:(i + 1) * m] = 1.0
    for j in range(m):
        A[n + j, j::m] = 1.0
    rhs = np.concatenate([a, b])
    A, rhs = A[:-1], rhs[:-1]          # one constraint is redundant
    k = n + m - 1
    subsets = np.array(list(itertools.combinations(range(n * m), k)))
    mats = A[:, subsets].transpose(1, 0, 2)
    dets = np.linalg.det(mats)
    ok = np.abs(dets) > 1e-9
    sols = np.linalg.solve(mats[ok], np.broadcast_to(rhs, (ok.sum(), k))[..., None])[..., 0]
    feasible = np.all(sols >= -1e-12, axis=1)
    c = cost.ravel()[subsets[ok][feasible]]
    return float(np.min(np.sum(c * sols[feasible], axis=1)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
