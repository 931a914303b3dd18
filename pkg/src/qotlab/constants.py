"""Explicit stability constants and the perturbation sizes they multiply.

The constants are evaluated verbatim from their closed forms; no attempt is
made to tighten them. Everything here is a pure function of its inputs.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass
from typing import Callable, Optional

import numpy as np

from .core import Instance
from .measures import (ClassParams, DiscreteMeasure, hausdorff_distance, merged_weights,
                       min_ball_mass, total_variation, wasserstein1)

SQRT2 = math.sqrt(2.0)


def gamma_eps(delta_p: float, lambda_p: float, Lambda_p: float, diam_p: float,
              lipschitz: float, eps: float, ball_mass: float, dim: int) -> float:
    """Error-bound constant.

    ``ball_mass`` is inf_y Q(B_{eps/(8L)}(y)).
    """
    if ball_mass <= 0:
        raise ValueError("ball mass must be positive")
    for v in (delta_p, lambda_p, Lambda_p, lipschitz, eps):
        if not v > 0:
            raise ValueError("all inputs must be positive")
    ratio = 8 * lipschitz / eps
    cells = math.ceil(ratio * diam_p)
    return (16 * (max(ratio, 1.0) ** dim / delta_p) * (Lambda_p / lambda_p) ** 2
            * cells ** (dim + 2) / ball_mass)


def vartheta(delta: float, delta_p: float, lipschitz: float, dim: int,
             ball_mass: Callable[[float], float]) -> float:
    """delta_P min{(delta/8L)^d, 1} inf_y Q(B_{delta/8L}(y))."""
    if not delta > 0:
        raise ValueError("delta must be positive")
    r = delta / (8 * lipschitz)
    return delta_p * min(r ** dim, 1.0) * ball_mass(r)


@dataclass(frozen=True)
class PointwiseConstants:
    gamma_eps: float
    vartheta_eps: float
    qhat_eps: float
    kappahat_eps: float
    etahat_eps: float


def pointwise_constants(q: DiscreteMeasure, eps: float, lipschitz: float, dim: int,
                        delta_p: float, lambda_p: float, Lambda_p: float,
                        diam_p: float) -> PointwiseConstants:
    """Per-instance constants of the L-infinity estimate for reference data (P, Q, c, eps)."""
    g = gamma_eps(delta_p, lambda_p, Lambda_p, diam_p, lipschitz, eps,
                  min_ball_mass(q, eps / (8 * lipschitz)), dim)
    th = vartheta(eps, delta_p, lipschitz, dim, lambda r: min_ball_mass(q, r))
    qhat = min_ball_mass(q, eps / (4 * lipschitz))
    khat = delta_p * min((eps / (4 * lipschitz)) ** dim, 1.0)
    eta = min(eps * math.sqrt(th) / (2 * g),
              eps * qhat / (2 * (1 + g)),
              eps * khat / (2 * (1 + g)))
    return PointwiseConstants(g, th, qhat, khat, eta)


@dataclass(frozen=True)
class StabilityConstants:
    gamma_bar: float
    vartheta_lower: float
    eta_bar: float
    kappahat_lower: float
    eta_bar_star: float
    c_bar: float
    # per-instance values for the reference datum, when available
    gamma_eps: Optional[float] = None
    vartheta_eps: Optional[float] = None
    qhat_eps: Optional[float] = None
    kappahat_eps: Optional[float] = None
    etahat_eps: Optional[float] = None

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


FORMULA_IDS = {
    "gamma_bar": "uniform-l2:gamma",
    "vartheta_lower": "uniform-l2:vartheta",
    "eta_bar": "uniform-l2:eta",
    "kappahat_lower": "uniform-linf:kappa",
    "eta_bar_star": "uniform-linf:eta-star",
    "c_bar": "uniform-linf:C",
    "gamma_eps": "error-bound:gamma",
    "vartheta_eps": "l2-modulus:vartheta",
    "qhat_eps": "linf:q-hat",
    "kappahat_eps": "linf:kappa-hat",
    "etahat_eps": "linf:eta-hat",
}


def uniform_constants(params: ClassParams) -> StabilityConstants:
    """Class-level constants with the class parameters substituted."""
    eps, L, D, d = params.eps_lower, params.lipschitz, params.diam_bound, params.dim
    delta, qlow = params.cone_const, params.ball_mass_lower
    gbar = (16 * (max(8 * L / eps, 1.0) ** d / delta)
            * (params.density_upper / params.density_lower) ** 2
            * math.ceil(8 * L * D / eps) ** (d + 2) / qlow)
    th = delta * min((eps / (8 * L)) ** d, 1.0) * qlow
    eta = eps * math.sqrt(th) / (2 * gbar)
    kappa = delta * min((eps / (4 * L)) ** d, 1.0)
    eta_star = min(eta, eps * qlow / (2 * (1 + gbar)), eps * kappa / (2 * (1 + gbar)))
    cbar = (1 + gbar) * (1 / qlow + 1 / kappa)
    return StabilityConstants(gbar, th, eta, kappa, eta_star, cbar)


def instance_constants(inst: Instance, params: ClassParams) -> StabilityConstants:
    """Uniform constants plus the per-instance ones for ``inst`` as reference."""
    uni = uniform_constants(params)
    pw = pointwise_constants(inst.q, inst.eps, params.lipschitz, params.dim,
                             params.instance_delta, params.instance_lambda,
                             params.instance_Lambda, inst.p.diameter())
    return StabilityConstants(uni.gamma_bar, uni.vartheta_lower, uni.eta_bar,
                              uni.kappahat_lower, uni.eta_bar_star, uni.c_bar,
                              pw.gamma_eps, pw.vartheta_eps, pw.qhat_eps,
                              pw.kappahat_eps, pw.etahat_eps)


def constants_csv(consts: StabilityConstants) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["name", "value", "formula_id"])
    for name, value in consts.to_dict().items():
        writer.writerow([name, repr(float(value)), FORMULA_IDS[name]])
    return buf.getvalue()


# --------------------------------------------------------------------------
# perturbation sizes


@dataclass(frozen=True)
class DeltaQuantities:
    delta_w: float
    delta: float
    delta_prime: float
    delta_bar: float
    delta_star: float
    delta_tv: float
    delta_omega: float
    small_delta_star: float
    a_const: float
    a_prime: float
    d_star: float
    delta_hat: float
    delta_hat_first: float
    delta_hat_second: float
    delta_hat_inf: float
    cost_l2_mu: float
    cost_l2_mu_prime: float
    cost_l2_mu_bar: float
    cost_linf: float

    def to_dict(self) -> dict:
        return asdict(self)


def union_points(a: DiscreteMeasure, b: DiscreteMeasure) -> np.ndarray:
    return merged_weights(a, b)[0]


def _l2(values: np.ndarray, p: DiscreteMeasure, q: DiscreteMeasure) -> float:
    return float(math.sqrt(max(p.weights @ (values * values) @ q.weights, 0.0)))


def product_diameter(pa: DiscreteMeasure, qa: DiscreteMeasure,
                     pb: DiscreteMeasure, qb: DiscreteMeasure) -> float:
    """sup of |z - z'| over (supp Pa x supp Qa) u (supp Pb x supp Qb)."""
    # within a product the x and y offsets are independent, so each
    # pairing of the two products contributes hypot(max |dx|, max |dy|)
    best = 0.0
    for (x1, y1) in ((pa.points, qa.points), (pb.points, qb.points)):
        for (x2, y2) in ((pa.points, qa.points), (pb.points, qb.points)):
            dx = _max_dist(x1, x2)
            dy = _max_dist(y1, y2)
            best = max(best, math.hypot(dx, dy))
    return best


def _max_dist(a: np.ndarray, b: np.ndarray) -> float:
    diff = a[:, None, :] - b[None, :, :]
    return float(np.sqrt(np.max(np.sum(diff * diff, axis=2))))


def delta_quantities(inst_a: Instance, inst_b: Instance, params: ClassParams,
                     consts: Optional[StabilityConstants] = None) -> DeltaQuantities:
    """All perturbation sizes between two data quadruples.

    Sup norms over X x Y are taken over the grid of union atoms, plus the
    declared analytic bound when the two costs are scaled copies of one another.
    """
    if consts is None:
        consts = uniform_constants(params)
    L = params.lipschitz
    pa, qa, pb, qb = inst_a.p, inst_a.q, inst_b.p, inst_b.q
    eps, eps2 = inst_a.eps, inst_b.eps

    dw = math.hypot(wasserstein1(pa, pb), wasserstein1(qa, qb))
    de = abs(eps - eps2)

    xs = union_points(pa, pb)
    ys = union_points(qa, qb)
    ca = inst_a.cost.evaluate(xs, ys)
    cb = inst_b.cost.evaluate(xs, ys)
    cost_linf = float(np.max(np.abs(ca - cb)))

    diff_a = inst_a.cost.matrix(pa, qa) - inst_b.cost.matrix(pa, qa)
    diff_b = inst_a.cost.matrix(pb, qb) - inst_b.cost.matrix(pb, qb)
    l2_a = _l2(diff_a, pa, qa)
    l2_b = _l2(diff_b, pb, qb)
    l2_bar = math.sqrt(0.5 * l2_a ** 2 + 0.5 * l2_b ** 2)

    delta = 2 * L * dw + l2_a + de
    delta_p = 2 * L * dw + l2_b + de
    delta_bar = 2 * L * dw + l2_bar + de
    delta_star = 2 * L * dw + cost_linf + de

    delta_tv = total_variation(pa, pb) + total_variation(qa, qb)
    delta_omega = math.hypot(hausdorff_distance(pa.points, pb.points),
                             hausdorff_distance(qa.points, qb.points))
    small_delta_star = consts.c_bar * delta_star + cost_linf

    a_const = 1 + 6 * float(np.max(np.abs(ca))) / eps
    a_prime = 1 + 6 * float(np.max(np.abs(cb))) / eps2
    d_star = product_diameter(pa, qa, pb, qb)

    base = consts.gamma_bar * delta_bar + l2_bar
    first = (base + a_prime * de) / eps
    second = (base + a_const * de) / eps2
    base_inf = consts.c_bar * delta_star + cost_linf
    hat_inf = min((base_inf + a_prime * de) / eps, (base_inf + a_const * de) / eps2)

    return DeltaQuantities(dw, delta, delta_p, delta_bar, delta_star, delta_tv, delta_omega,
                           small_delta_star, a_const, a_prime, d_star, min(first, second),
                           first, second, hat_inf, l2_a, l2_b, l2_bar, cost_linf)
