"""Perturbation families and conditional checking of every stability bound.

A bound is asserted only when its smallness hypothesis holds. Checks whose
hypothesis fails are still recorded (lhs, rhs, ratio) and flagged as not
applicable.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .constants import (SQRT2, DeltaQuantities, StabilityConstants, delta_quantities,
                        instance_constants, union_points)
from .core import (DEFAULT_TOL, CostSpec, Instance, NotConvergedError, Potentials,
                   extend_f, extend_g, extract_coupling, product_points, solve_dual,
                   support_mask)
from .measures import (ClassParams, DiscreteMeasure, audit_class_membership, hausdorff_distance,
                       merged_weights, mixture, normalized, transport_lp)

log = logging.getLogger(__name__)

KINDS = ("marginal-mixture", "atom-translation", "weight-tilt", "cost-scale", "eps-ramp")
W1_COUPLING_MAX_VARS = 250_000


# --------------------------------------------------------------------------
# perturbations


@dataclass(frozen=True)
class PerturbationSpec:
    """A one-parameter family of perturbations of one datum.

    ``other`` is the second measure of a mixture, ``vector`` the translation
    direction, ``tilt`` a map (points, t) -> positive reweighting factors.
    """

    kind: str
    grid: tuple
    target: str = "P"
    other: Optional[DiscreteMeasure] = None
    vector: Optional[tuple] = None
    tilt: Optional[Callable] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown perturbation kind {self.kind!r}")
        if not self.grid:
            raise ValueError("parameter grid must be nonempty")
        if any(not 0 <= t <= 1 for t in self.grid):
            raise ValueError("parameter grid must lie in [0, 1]")
        expected = {"cost-scale": "c", "eps-ramp": "eps"}.get(self.kind)
        if expected and self.target != expected:
            object.__setattr__(self, "target", expected)
        if self.kind in ("marginal-mixture", "atom-translation", "weight-tilt") \
                and self.target not in ("P", "Q"):
            raise ValueError(f"{self.kind} perturbs P or Q, not {self.target!r}")
        if self.kind == "marginal-mixture" and self.other is None:
            raise ValueError("marginal-mixture needs the other measure")
        if self.kind == "atom-translation" and self.vector is None:
            raise ValueError("atom-translation needs a vector")


@dataclass(frozen=True)
class Perturbed:
    t: float
    instance: Instance
    in_class: Optional[bool] = None


def linear_tilt(direction=None):
    """Lipschitz tilt 1 + t * <x - mean, direction> / spread, kept positive for t <= 1."""
    def tilt(points, t):
        d = np.ones(points.shape[1]) if direction is None else np.asarray(direction, dtype=float)
        s = points @ d
        spread = max(float(np.max(np.abs(s - s.mean()))), 1e-300)
        return 1.0 + 0.5 * t * (s - s.mean()) / spread
    return tilt


def _apply(base: Instance, spec: PerturbationSpec, t: float) -> Instance:
    label = f"{base.label}|{spec.kind}:{spec.target}@{t:g}"
    if t == 0:
        return Instance(base.p, base.q, base.cost, base.eps, label)
    if spec.kind == "cost-scale":
        return Instance(base.p, base.q, base.cost.scaled(1 + t), base.eps, label)
    if spec.kind == "eps-ramp":
        return Instance(base.p, base.q, base.cost, base.eps * (1 + t), label)
    m = base.p if spec.target == "P" else base.q
    if spec.kind == "marginal-mixture":
        new = mixture(m, spec.other, t)
    elif spec.kind == "atom-translation":
        v = np.asarray(spec.vector, dtype=float)
        new = DiscreteMeasure.from_arrays(m.points + t * v, m.weights)
    else:
        factors = np.asarray(spec.tilt(m.points, t) if spec.tilt else linear_tilt()(m.points, t))
        if np.any(factors <= 0):
            raise ValueError("tilt factors must be positive")
        new = DiscreteMeasure.from_arrays(m.points, normalized(m.weights * factors), m.box)
    if spec.target == "P":
        return Instance(new, base.q, base.cost, base.eps, label)
    return Instance(base.p, new, base.cost, base.eps, label)


def perturb(base: Instance, spec: PerturbationSpec,
            params: Optional[ClassParams] = None) -> list:
    """Instances along the family; with ``params`` each one is audited (not fatal)."""
    out = []
    for t in spec.grid:
        inst = _apply(base, spec, float(t))
        in_class = None
        if params is not None:
            in_class = audit_class_membership(inst.p, inst.q, inst.cost, inst.eps, params).ok
            if not in_class:
                log.warning("perturbed instance %s leaves the class", inst.label)
        out.append(Perturbed(float(t), inst, in_class))
    return out


# --------------------------------------------------------------------------
# solving with a shared cache


@dataclass
class Solved:
    instance: Instance
    pot: Potentials
    coupling: object


class SolveCache:
    """Content-addressed cache of solved instances; safe for concurrent use."""

    def __init__(self, tol: float = DEFAULT_TOL, max_iter: int = 100_000):
        self.tol = tol
        self.max_iter = max_iter
        self._lock = threading.Lock()
        self._data: dict = {}

    def solve(self, inst: Instance) -> Solved:
        key = (inst.content_hash(), self.tol)
        with self._lock:
            hit = self._data.get(key)
        if hit is not None:
            return Solved(inst, hit.pot, hit.coupling)
        pot = solve_dual(inst.p, inst.q, inst.cost, inst.eps, tol=self.tol, max_iter=self.max_iter)
        if not pot.converged:
            raise NotConvergedError(f"{inst.label}: residual {pot.foc_residual_inf:.3e}")
        solved = Solved(inst, pot, extract_coupling(pot, inst.p, inst.q, inst.cost))
        with self._lock:
            self._data.setdefault(key, solved)
        return solved

    def __len__(self):
        return len(self._data)


# --------------------------------------------------------------------------
# nondegeneracy


def _sigma_on_fiber(sol: Solved, x: np.ndarray, j: int) -> np.ndarray:
    inst = sol.instance
    y = inst.q.points[j:j + 1]
    return (extend_f(sol.pot, inst.q, inst.cost, x) + sol.pot.g[j]
            - inst.cost.evaluate(x, y)[:, 0])


def estimate_nondegeneracy(sol: Solved, mode: str = "discrete", neighbours: int = 8,
                           bisection_steps: int = 60) -> float:
    """Empirical detachment rate inf over exterior grid points of -sigma / dist(z, support).

    ``mode='discrete'`` measures distances to the discrete support.
    ``mode='refined'`` replaces the distance along each fiber by the distance
    to the zero crossing of the extended slack on segments towards nearby
    support points and towards the fiber maximum, which upper-bounds the
    distance to the continuum support. Exterior points that lie on the
    closure of the support are skipped. Returns +inf when the exterior is empty.
    """
    inst, coup = sol.instance, sol.coupling
    mask = support_mask(coup)
    if mask.all():
        return math.inf
    sigma = sol.pot.h() - inst.cost_matrix()
    z = product_points(inst.p, inst.q)
    flat = mask.ravel()
    ext = ~flat
    d_disc = cdist(z[ext], z[flat]).min(axis=1)
    if mode == "discrete":
        return float(np.min(np.maximum(-sigma.ravel()[ext], 0.0) / d_disc))
    if mode != "refined":
        raise ValueError(f"unknown mode {mode!r}")
    if inst.cost.kind == "matrix":
        raise ValueError("refined mode needs a cost defined off the atoms")

    xs = inst.p.points
    best = math.inf
    spacing = _min_spacing(xs)
    for j in range(inst.q.n):
        ins = np.nonzero(mask[:, j])[0]
        outs = np.nonzero(~mask[:, j])[0]
        if outs.size == 0:
            continue
        ext_rows = outs * inst.q.n + j
        # distance to support on other fibers (a subset of the continuum support)
        other = flat.copy()
        other[j::inst.q.n] = False
        dist = (cdist(z[ext_rows], z[other]).min(axis=1) if other.any()
                else np.full(outs.size, math.inf))
        if ins.size:
            k = min(neighbours, ins.size)
            dx = cdist(xs[outs], xs[ins])
            near = np.argsort(dx, axis=1)[:, :k]
            targets = np.concatenate([ins[near], np.full((outs.size, 1),
                                                         ins[np.argmax(sigma[ins, j])])], axis=1)
            start = np.repeat(xs[outs], targets.shape[1], axis=0)
            stop = xs[targets.ravel()]
            lo = np.zeros(start.shape[0])
            hi = np.ones(start.shape[0])
            for _ in range(bisection_steps):
                mid = 0.5 * (lo + hi)
                pos = _sigma_on_fiber(sol, start + mid[:, None] * (stop - start), j) > 0
                hi = np.where(pos, mid, hi)
                lo = np.where(pos, lo, mid)
            seg = hi * np.linalg.norm(stop - start, axis=1)
            dist = np.minimum(dist, seg.reshape(outs.size, -1).min(axis=1))
        s = -sigma[outs, j]
        interior = dist > 1e-9 * spacing
        if np.any(interior):
            best = min(best, float(np.min(np.maximum(s[interior], 0.0) / dist[interior])))
    return best


def _min_spacing(points: np.ndarray) -> float:
    if points.shape[0] < 2:
        return 1.0
    d = cdist(points, points)
    return float(d[d > 0].min())


def _is_quadratic(cost: CostSpec) -> bool:
    return cost.kind == "sqeuclidean"


# --------------------------------------------------------------------------
# report


@dataclass
class Check:
    id: str
    hypothesis: bool
    lhs: Optional[float]
    rhs: float
    ratio: Optional[float]
    passed: Optional[bool]
    note: str = ""

    def to_dict(self) -> dict:
        return {"id": self.id, "hypothesis": self.hypothesis, "lhs": self.lhs, "rhs": self.rhs,
                "ratio": self.ratio, "pass": self.passed, "note": self.note}


def _check(cid: str, hypothesis: bool, lhs, rhs: float, note: str = "") -> Check:
    ratio = None
    if lhs is not None and math.isfinite(rhs):
        ratio = (lhs / rhs) if rhs > 0 else (0.0 if lhs == 0 else math.inf)
    passed = None
    if hypothesis:
        passed = lhs is not None and lhs <= rhs * (1 + 1e-12) + 1e-14
        if lhs is None:
            note = (note + "; " if note else "") + "lhs not computed"
    return Check(cid, hypothesis, lhs, rhs, ratio, passed, note)


@dataclass
class StabilityReport:
    instances: dict
    deltas: DeltaQuantities
    constants: StabilityConstants
    checks: list
    nondegeneracy: dict
    norms: dict = field(default_factory=dict)

    @property
    def failures(self) -> list:
        return [c for c in self.checks if c.hypothesis and c.passed is False]

    @property
    def ok(self) -> bool:
        return not self.failures

    def check(self, cid: str) -> Check:
        for c in self.checks:
            if c.id == cid:
                return c
        raise KeyError(cid)

    def to_dict(self) -> dict:
        return {"instances": self.instances, "deltas": self.deltas.to_dict(),
                "constants": self.constants.to_dict(),
                "checks": [c.to_dict() for c in self.checks],
                "nondegeneracy": self.nondegeneracy, "norms": self.norms}


def _coupling_tv(sa: Solved, sb: Solved) -> float:
    za = product_points(sa.instance.p, sa.instance.q)
    zb = product_points(sb.instance.p, sb.instance.q)
    ma = DiscreteMeasure(za, sa.coupling.mass.ravel())
    mb = DiscreteMeasure(zb, sb.coupling.mass.ravel())
    _, wa, wb = merged_weights(ma, mb)
    return 0.5 * math.fsum(np.abs(wa - wb).tolist())


def _coupling_w1(sa: Solved, sb: Solved) -> Optional[float]:
    za = product_points(sa.instance.p, sa.instance.q)
    zb = product_points(sb.instance.p, sb.instance.q)
    wa = sa.coupling.mass.ravel()
    wb = sb.coupling.mass.ravel()
    keep_a, keep_b = wa > 0, wb > 0
    if keep_a.sum() * keep_b.sum() > W1_COUPLING_MAX_VARS:
        return None
    a = wa[keep_a] / wa[keep_a].sum()
    b = wb[keep_b] / wb[keep_b].sum()
    return transport_lp(a, b, cdist(za[keep_a], zb[keep_b]))[0]


def run_pair(inst_a: Instance, inst_b: Instance, params: ClassParams,
             cache: Optional[SolveCache] = None, nondegeneracy_mode: str = "refined",
             constants: Optional[StabilityConstants] = None) -> StabilityReport:
    """Solve both instances and evaluate every bound whose hypothesis holds."""
    cache = SolveCache() if cache is None else cache
    sa, sb = cache.solve(inst_a), cache.solve(inst_b)
    consts = constants or instance_constants(inst_a, params)
    dq = delta_quantities(inst_a, inst_b, params, consts)
    L = params.lipschitz
    pa, qa, ca = inst_a.p, inst_a.q, inst_a.cost
    pb, qb, cb = inst_b.p, inst_b.q, inst_b.cost
    eps, eps2 = inst_a.eps, inst_b.eps

    xs = union_points(pa, pb)
    ys = union_points(qa, qb)
    fa, ga = extend_f(sa.pot, qa, ca, xs), extend_g(sa.pot, pa, ca, ys)
    fb, gb = extend_f(sb.pot, qb, cb, xs), extend_g(sb.pot, pb, cb, ys)
    # gauge shift a = int (g' - g) dQ, evaluated on the atoms of Q
    g_b_on_q = extend_g(sb.pot, pb, cb, qa.points)
    a_shift = float(qa.weights @ (g_b_on_q - sa.pot.g))

    h_a = fa[:, None] + ga[None, :]
    h_b = fb[:, None] + gb[None, :]
    c_a = ca.evaluate(xs, ys)
    c_b = cb.evaluate(xs, ys)
    zeta_a = np.maximum(h_a - c_a, 0.0) / eps
    zeta_b = np.maximum(h_b - c_b, 0.0) / eps2

    def on(p, q, grid):
        ix = _index(xs, p.points)
        iy = _index(ys, q.points)
        return grid[np.ix_(ix, iy)]

    def l2(p, q, grid):
        vals = on(p, q, grid)
        return math.sqrt(max(float(p.weights @ (vals * vals) @ q.weights), 0.0))

    dh = h_a - h_b
    dz = zeta_a - zeta_b
    l2_mu, l2_mup = l2(pa, qa, dh), l2(pb, qb, dh)
    l2_bar = math.sqrt(0.5 * l2_mu ** 2 + 0.5 * l2_mup ** 2)
    zl2_bar = math.sqrt(0.5 * l2(pa, qa, dz) ** 2 + 0.5 * l2(pb, qb, dz) ** 2)
    linf_h = float(np.max(np.abs(dh)))
    linf_f = float(np.max(np.abs(fa - fb - a_shift)))
    linf_g = float(np.max(np.abs(ga - gb + a_shift)))
    linf_zeta = float(np.max(np.abs(dz)))
    tv = _coupling_tv(sa, sb)
    w1 = _coupling_w1(sa, sb)
    supp_a = _support_points(sa)
    supp_b = _support_points(sb)
    d_h = hausdorff_distance(supp_a, supp_b)

    hyp_l2 = max(dq.delta, dq.delta_prime) < consts.eta_bar
    hyp_inf = dq.delta_star < consts.eta_bar_star
    gbar, cbar = consts.gamma_bar, consts.c_bar
    qlow, klow = params.ball_mass_lower, consts.kappahat_lower
    aa = 0.5 * (dq.a_const + dq.a_prime)
    checks = [
        _check("l2-unprimed", hyp_l2, l2_mu, gbar * dq.delta),
        _check("l2-primed", hyp_l2, l2_mup, gbar * dq.delta_prime),
        _check("l2-mixture", hyp_l2, l2_bar, gbar * dq.delta_bar),
        _check("linf-f", hyp_inf, linf_f, (1 + gbar) / qlow * dq.delta_star),
        _check("linf-g", hyp_inf, linf_g, (1 + gbar) / klow * dq.delta_star),
        _check("linf-h", hyp_inf, linf_h, cbar * dq.delta_star),
        _check("density-l2", hyp_l2, zl2_bar, dq.delta_hat),
        _check("coupling-tv", hyp_l2, tv, dq.delta_hat / 2 + aa * dq.delta_tv),
        _check("coupling-w1", hyp_l2, w1,
               dq.d_star * dq.delta_hat / 2
               + SQRT2 * (aa + (SQRT2 + 1) * L * dq.d_star * (1 / eps + 1 / eps2) / 4) * dq.delta_w,
               "" if w1 is not None else "coupling LP above size limit"),
        _check("density-linf", hyp_inf, linf_zeta, dq.delta_hat_inf),
    ]

    # support stability
    quadratic = _is_quadratic(ca) and _is_quadratic(cb)
    nd = {"quadratic": quadratic}
    ahat_a = estimate_nondegeneracy(sa, "discrete")
    ahat_b = estimate_nondegeneracy(sb, "discrete")
    nd["a_hat_discrete"] = [ahat_a, ahat_b]
    if ca.kind != "matrix" and cb.kind != "matrix":
        nd["a_hat_refined"] = [estimate_nondegeneracy(sa, "refined"),
                               estimate_nondegeneracy(sb, "refined")]
    if quadratic:
        diam_a, diam_b = pa.diameter(), pb.diameter()
        a_theory = min(_ratio(eps, diam_a), _ratio(eps2, diam_b))
        nd["a_theory"] = a_theory
        a_used = a_theory
        nd["source"] = "eps / diam(support P), min over the pair"
    else:
        key = "a_hat_refined" if (nondegeneracy_mode == "refined" and "a_hat_refined" in nd) \
            else "a_hat_discrete"
        a_used = min(nd[key])
        nd["source"] = f"min of {key} over the pair"
    # numerical zero: sigma is only known to rounding precision
    scale = max(float(np.max(np.abs(h_a - c_a))), float(np.max(np.abs(h_b - c_b))), 1.0)
    if math.isfinite(a_used) and a_used <= 1e-9 * scale:
        a_used = 0.0
    nd["a_hat"] = a_used
    nd["applicable"] = a_used > 0
    if math.isinf(a_used):
        rhs_support = dq.delta_omega
        note = "exterior empty: a = +inf"
    elif a_used > 0:
        rhs_support = (1 + (SQRT2 + 1) * L / a_used) * dq.delta_omega + dq.small_delta_star / a_used
        note = ""
    else:
        rhs_support = math.inf
        note = "nondegeneracy fails (a = 0)"
    checks.append(_check("support-hausdorff", hyp_inf and nd["applicable"], d_h, rhs_support,
                         note if nd["applicable"] else "not applicable: " + note))
    if quadratic and eps == eps2 and ca.scale == cb.scale:
        D = params.diam_bound
        rhs64 = ((1 + (SQRT2 + 1) * L * D / eps) * dq.delta_omega
                 + 2 * L * D * cbar / eps * dq.delta_w)
        checks.append(_check("support-hausdorff-quadratic", 2 * L * dq.delta_w < consts.eta_bar_star,
                             d_h, rhs64))

    norms = {"gauge_shift": a_shift, "h_l2_mu": l2_mu, "h_l2_mu_prime": l2_mup,
             "h_l2_mu_bar": l2_bar, "h_linf": linf_h, "zeta_l2_mu_bar": zl2_bar,
             "zeta_linf": linf_zeta, "coupling_tv": tv, "coupling_w1": w1,
             "support_hausdorff": d_h}
    return StabilityReport({"a": inst_a.label, "b": inst_b.label}, dq, consts, checks, nd, norms)


def _ratio(eps: float, diam: float) -> float:
    return math.inf if diam == 0 else eps / diam


def _support_points(sol: Solved) -> np.ndarray:
    mask = support_mask(sol.coupling).ravel()
    return product_points(sol.instance.p, sol.instance.q)[mask]


def _index(grid: np.ndarray, pts: np.ndarray) -> list:
    lookup = {tuple(r): i for i, r in enumerate(grid.tolist())}
    return [lookup[tuple(r)] for r in pts.tolist()]


def run_pairs(pairs: Sequence, params: ClassParams, jobs: int = 1,
              cache: Optional[SolveCache] = None) -> list:
    """run_pair over many pairs; ``jobs > 1`` uses a thread pool sharing one cache."""
    cache = SolveCache() if cache is None else cache
    if jobs <= 1:
        return [run_pair(a, b, params, cache) for a, b in pairs]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(lambda ab: run_pair(ab[0], ab[1], params, cache), pairs))


# --------------------------------------------------------------------------
# Lipschitz ratio curves


CURVE_HEADER = ("t", "delta_star", "linf_diff", "ratio", "hypothesis")


def lipschitz_ratio_curve(base: Instance, spec: PerturbationSpec, params: ClassParams,
                          cache: Optional[SolveCache] = None) -> list:
    """Rows (t, Delta_*, sup|h_t - h_0|, ratio, hypothesis) along a family."""
    cache = SolveCache() if cache is None else cache
    consts = instance_constants(base, params)
    rows = []
    for item in perturb(base, spec):
        rep = run_pair(base, item.instance, params, cache, constants=consts)
        ds = rep.deltas.delta_star
        diff = rep.norms["h_linf"]
        ratio = diff / ds if ds > 0 else 0.0
        rows.append({"t": item.t, "delta_star": ds, "linf_diff": diff, "ratio": ratio,
                     "hypothesis": ds < consts.eta_bar_star})
    return rows


def curve_csv(rows: list) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CURVE_HEADER)
    for r in rows:
        writer.writerow([repr(float(r["t"])), repr(float(r["delta_star"])),
                         repr(float(r["linf_diff"])), repr(float(r["ratio"])),
                         int(bool(r["hypothesis"]))])
    return buf.getvalue()
