import json
import sys
from pathlib import Path

import numpy as np
import pytest

from clq import qp
from clq.config import example_path, parse_config
from clq.finite_horizon import ProblemData

TESTS = Path(__file__).parent
sys.path.insert(0, str(TESTS))

ORACLES = json.loads((TESTS / "data" / "oracles.json").read_text())


@pytest.fixture(scope="session")
def oracles():
    return ORACLES


@pytest.fixture(scope="session")
def ex1_stationary():
    return parse_config(example_path("example1_stationary"))


@pytest.fixture(scope="session")
def ex1_nosolution():
    return parse_config(example_path("example1_nosolution"))


@pytest.fixture(scope="session")
def ex1_finite():
    return parse_config(example_path("example1_finite"))


@pytest.fixture(scope="session")
def ex2_problem():
    return parse_config(example_path("example2_mv"))


@pytest.fixture(scope="session")
def ex1_stationary_solution(ex1_stationary):
    from clq.infinite_horizon import solve_stationary
    return solve_stationary(ex1_stationary)


@pytest.fixture(scope="session")
def ex1_finite_solution(ex1_finite):
    from clq.finite_horizon import solve_riccati_pair
    return solve_riccati_pair(ex1_finite)


@pytest.fixture(scope="session")
def ex2_solution(ex2_problem):
    from clq.meanvar import solve_mv
    return solve_mv(ex2_problem)


# random instance generators shared by the module and acceptance tests

def random_pd(rng, n, floor=0.1):
    M = rng.standard_normal((n, n))
    return M @ M.T + floor * np.eye(n)


def random_qp(rng, n=None, k=None):
    """PD omega, random w, and a polyhedron with interior (slack in [0.05, 1])."""
    n = n or int(rng.integers(1, 4))
    k = int(rng.integers(0, 7)) if k is None else k
    omega = random_pd(rng, n)
    w = rng.standard_normal(n) * 2.0
    H = rng.standard_normal((k, n))
    K0 = rng.standard_normal(n)
    d = H @ K0 + rng.uniform(0.05, 1.0, k)
    return omega, w, qp.Polyhedron(H, d)


def random_lq(rng, horizon=1.0, region=None, steps=1000, q_T=None):
    """Constant-coefficient data with PSD cost and DD' PD (m >= n)."""
    n = int(rng.integers(1, 4))
    m = int(rng.integers(n, 4))
    A = rng.uniform(-1.0, 1.0)
    B = rng.standard_normal(n)
    C = rng.standard_normal(m) * 0.5
    D = rng.standard_normal((n, m))
    D = D + np.eye(n, m) * 1.5
    R = random_pd(rng, n, 0.5)
    S = rng.standard_normal(n) * 0.3
    q = float(S @ np.linalg.solve(R, S)) + rng.uniform(0.1, 2.0)
    q_T = rng.uniform(0.0, 2.0) if q_T is None else q_T
    return ProblemData.constant(horizon, A, B, C, D, R, S, q, q_T, region,
                                np.linspace(0.0, horizon, steps + 1))
