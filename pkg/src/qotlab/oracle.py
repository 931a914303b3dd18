"""Brute-force primal solver used as ground truth on small instances.

Minimizes <c, pi> + (eps/2) sum_ij pi_ij^2 / (p_i q_j) over the
transportation polytope by projected gradient descent. The Euclidean
projection onto the polytope is computed with Dykstra's algorithm
alternating between row-wise and column-wise scaled simplex projections.
Nothing here touches the dual potentials.
"""

from __future__ import annotations

import numpy as np

from .core import Coupling, CostSpec, _as_matrix, extract_coupling, solve_dual
from .measures import DiscreteMeasure

MAX_CELLS = 400


class OracleError(RuntimeError):
    pass


def project_rows_simplex(z: np.ndarray, mass: np.ndarray) -> np.ndarray:
    """Project each row z_i onto {x >= 0, sum x = mass_i}."""
    k = z.shape[1]
    s = -np.sort(-z, axis=1)
    css = np.cumsum(s, axis=1) - mass[:, None]
    idx = np.arange(1, k + 1)
    cond = s - css / idx > 0
    rho = k - 1 - np.argmax(cond[:, ::-1], axis=1)
    theta = css[np.arange(z.shape[0]), rho] / (rho + 1)
    return np.maximum(z - theta[:, None], 0.0)


def project_transport_polytope(z: np.ndarray, a: np.ndarray, b: np.ndarray,
                               tol: float = 1e-12, max_iter: int = 1_000_000) -> np.ndarray:
    """Euclidean projection of z onto {pi >= 0, pi 1 = a, pi^T 1 = b} (Dykstra)."""
    x = z.copy()
    corr_r = np.zeros_like(z)
    corr_c = np.zeros_like(z)
    for _ in range(max_iter):
        y = project_rows_simplex(x + corr_r, a)
        corr_r = x + corr_r - y
        x_new = project_rows_simplex((y + corr_c).T, b).T
        corr_c = y + corr_c - x_new
        change = np.max(np.abs(x_new - x))
        x = x_new
        if change <= tol and np.max(np.abs(x.sum(axis=1) - a)) <= tol:
            return x
    raise OracleError("Dykstra projection did not converge")


def _objective(pi, c, pq, eps):
    return float(np.sum(pi * c) + 0.5 * eps * np.sum(pi * pi / pq))


def qp_primal_solve(p: DiscreteMeasure, q: DiscreteMeasure, cost, eps: float,
                    tol: float = 1e-13, max_iter: int = 200_000) -> Coupling:
    """Unique minimizer of the regularized primal, by projected gradient."""
    if p.n * q.n > MAX_CELLS:
        raise OracleError(f"oracle limited to {MAX_CELLS} cells, got {p.n * q.n}")
    c = _as_matrix(cost, p, q)
    a, b = p.weights, q.weights
    pq = np.outer(a, b)
    # Hessian of the objective in the mass variables is diag(eps / (p_i q_j))
    step = pq.min() / eps
    pi = pq.copy()
    for _ in range(max_iter):
        grad = c + eps * pi / pq
        nxt = project_transport_polytope(pi - step * grad, a, b)
        move = np.max(np.abs(nxt - pi)) / step
        pi = nxt
        if move <= tol:
            break
    else:
        raise OracleError("projected gradient did not reach stationarity")
    zeta = pi / pq
    return Coupling(zeta, pi, p, q, 0.0)


def oracle_objective(coup: Coupling, cost, eps: float) -> float:
    c = _as_matrix(cost, coup.p, coup.q)
    return _objective(coup.mass, c, np.outer(coup.p.weights, coup.q.weights), eps)


def oracle_agreement(p: DiscreteMeasure, q: DiscreteMeasure, cost, eps: float) -> float:
    """L-infinity distance between the dual-solver density and the oracle density."""
    pot = solve_dual(p, q, cost, eps)
    dual_coup = extract_coupling(pot, p, q, cost)
    primal_coup = qp_primal_solve(p, q, cost, eps)
    return float(np.max(np.abs(dual_coup.zeta - primal_coup.zeta)))


def independent_coupling(p: DiscreteMeasure, q: DiscreteMeasure) -> np.ndarray:
    return np.outer(p.weights, q.weights)


def northwest_corner(p: DiscreteMeasure, q: DiscreteMeasure) -> np.ndarray:
    a = p.weights.copy()
    b = q.weights.copy()
    pi = np.zeros((p.n, q.n))
    i = j = 0
    while i < p.n and j < q.n:
        t = min(a[i], b[j])
        pi[i, j] = t
        a[i] -= t
        b[j] -= t
        if a[i] <= b[j]:
            i += 1
        else:
            j += 1
    return pi
