import math

import numpy as np
import pytest

from qotlab.core import CostSpec, extract_coupling, solve_dual
from qotlab.fixtures import example62, zero_cost_instance
from qotlab.measures import DiscreteMeasure
from qotlab.oracle import (OracleError, independent_coupling, northwest_corner, oracle_agreement,
                           oracle_objective, project_transport_polytope, qp_primal_solve)

from conftest import random_measure


def test_zero_cost_is_product(rng):
    inst, _ = zero_cost_instance(random_measure(rng, 4), random_measure(rng, 5), 0.8)
    coup = qp_primal_solve(inst.p, inst.q, inst.cost, inst.eps)
    assert np.max(np.abs(coup.mass - independent_coupling(inst.p, inst.q))) <= 1e-8
    assert oracle_agreement(inst.p, inst.q, inst.cost, inst.eps) <= 1e-10


def test_dirac_source(rng):
    p = DiscreteMeasure.dirac([0.3])
    q = random_measure(rng, 5)
    coup = qp_primal_solve(p, q, CostSpec.sqeuclidean(2.0), 0.1)
    assert np.max(np.abs(coup.mass[0] - q.weights)) <= 1e-12


@pytest.mark.parametrize("kappa, eps, expected", [
    (1.0, 4.0, 0.25 + 1.0 / 32),     # interior: a = 1/4 + kappa / (8 eps)
    (1.0, 1.0, 0.375),
    (1.0, 0.25, 0.5),                # kappa >= 2 eps: diagonal coupling
])
def test_two_by_two_kkt(kappa, eps, expected):
    # p = q = (1/2, 1/2), c = kappa [[0, 1], [1, 0]], pi = [[a, 1/2 - a], [1/2 - a, a]]
    p = DiscreteMeasure.from_arrays([[0.0], [1.0]], [0.5, 0.5])
    cost = CostSpec.from_matrix(p, p, kappa * np.array([[0.0, 1.0], [1.0, 0.0]]))
    coup = qp_primal_solve(p, p, cost, eps)
    assert coup.mass[0, 0] == pytest.approx(expected, abs=1e-10)
    assert coup.mass[1, 1] == pytest.approx(expected, abs=1e-10)


def test_objective_not_above_simple_couplings(rng):
    for _ in range(5):
        p, q = random_measure(rng, 5, 2), random_measure(rng, 4, 2)
        cost = CostSpec.sqeuclidean(2.0)
        eps = rng.uniform(0.1, 2)
        coup = qp_primal_solve(p, q, cost, eps)
        c = cost.matrix(p, q)
        pq = independent_coupling(p, q)
        for pi in (pq, northwest_corner(p, q)):
            val = float(np.sum(pi * c) + 0.5 * eps * np.sum(pi * pi / pq))
            assert oracle_objective(coup, cost, eps) <= val + 1e-12


def test_marginals(rng):
    p, q = random_measure(rng, 6, 3), random_measure(rng, 5, 3)
    coup = qp_primal_solve(p, q, CostSpec.sqeuclidean(3.0), 0.3)
    assert np.max(np.abs(coup.mass.sum(axis=1) - p.weights)) <= 1e-10
    assert np.max(np.abs(coup.mass.sum(axis=0) - q.weights)) <= 1e-10
    assert np.all(coup.mass >= 0)


def test_northwest_corner_feasible(rng):
    p, q = random_measure(rng, 6), random_measure(rng, 4)
    pi = northwest_corner(p, q)
    assert np.allclose(pi.sum(axis=1), p.weights, atol=1e-15)
    assert np.allclose(pi.sum(axis=0), q.weights, atol=1e-15)


def test_projection_fixed_point(rng):
    p, q = random_measure(rng, 4), random_measure(rng, 3)
    pi = independent_coupling(p, q)
    assert np.max(np.abs(project_transport_polytope(pi, p.weights, q.weights) - pi)) <= 1e-14


def test_size_limit():
    m = DiscreteMeasure.uniform(np.linspace(0, 1, 21)[:, None])
    with pytest.raises(OracleError):
        qp_primal_solve(m, m, CostSpec.sqeuclidean(math.sqrt(2)), 1.0)


def test_example62_coarse_grid():
    ex = example62(0.0, grid_n=9)
    assert oracle_agreement(ex.p, ex.q, ex.cost, ex.eps) <= 1e-6


def test_random_agreement(rng):
    for _ in range(5):
        p, q = random_measure(rng, 5, 2), random_measure(rng, 5, 2)
        cost = CostSpec.sqeuclidean(2.0)
        pot = solve_dual(p, q, cost, 0.2)
        zeta = extract_coupling(pot, p, q, cost).zeta
        assert np.max(np.abs(zeta - qp_primal_solve(p, q, cost, 0.2).zeta)) <= 1e-6
