"""Closed-form test instances.

* the support-instability family on [0, 1] x {0, 1} (``example62``), with the
  marginal density tilted by eta and exact rational integration of every
  piecewise-linear quantity;
* the zero-cost instance, whose solution is the product coupling;
* quadratic-cost instances on a uniform grid over a convex box.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from .core import CostSpec, Instance, Potentials
from .measures import ClassParams, DiscreteMeasure, normalized

EX62_EPS = 1.0
# knots of u and of the density p_eta
_U_KNOTS = (Fraction(0), Fraction(1, 4), Fraction(1, 2), Fraction(1))


def u_exact(x: Fraction) -> Fraction:
    if x <= Fraction(1, 4):
        return Fraction(0)
    if x < Fraction(1, 2):
        return Fraction(32, 5) * (x - Fraction(1, 4))
    return Fraction(8, 5)


def density_exact(eta: Fraction, x: Fraction) -> Fraction:
    """p_eta(x); the value on the left piece includes x = 1/4."""
    return 1 + eta if x <= Fraction(1, 4) else 1 - eta / 3


def _density_cdf(eta: Fraction, x: Fraction) -> Fraction:
    quarter = Fraction(1, 4)
    if x <= quarter:
        return (1 + eta) * x
    return (1 + eta) * quarter + (1 - eta / 3) * (x - quarter)


@dataclass(frozen=True, eq=False)
class Example62Instance:
    eta: float
    grid_n: int
    p: DiscreteMeasure
    q: DiscreteMeasure
    cost: CostSpec
    eps: float
    delta_eta: float
    h: np.ndarray        # closed-form h on the grid, shape (n, 2)
    sigma: np.ndarray    # h - c on the grid
    f: np.ndarray
    g: np.ndarray

    @property
    def instance(self) -> Instance:
        return Instance(self.p, self.q, self.cost, self.eps, f"example62(eta={self.eta})")

    @property
    def x(self) -> np.ndarray:
        return self.p.points[:, 0]

    def potentials(self) -> Potentials:
        return Potentials(self.f.copy(), self.g.copy(), self.eps, {"closed_form": 0.0}, 0.0)

    def support_mask(self) -> np.ndarray:
        return self.sigma > 0

    def support_points(self) -> np.ndarray:
        ii, jj = np.nonzero(self.support_mask())
        return np.column_stack([self.x[ii], self.q.points[jj, 0]])

    def analytic_support_segments(self) -> list:
        """Continuum support as horizontal segments (y, x_start, x_end)."""
        if self.eta == 0:
            return [(0.0, 0.0, 1.0), (1.0, 0.25, 1.0)]
        return [(0.0, 0.0, 1.0), (1.0, 0.0, 1.0)]


def example62(eta: float, grid_n: int = 801) -> Example62Instance:
    """Discretized counterexample family with its closed-form solution.

    Atoms sit at the nodes k/(grid_n - 1); each atom carries the exact
    p_eta-mass of its cell, the cells being bounded by the midpoints between
    neighbouring nodes. ``grid_n - 1`` must be divisible by 4 so that the
    knots 1/4 and 1/2 are nodes, which makes the discrete closed form exact.
    """
    if not 0 <= eta < 1:
        raise ValueError(f"eta must lie in [0, 1), got {eta}")
    if grid_n < 9 or (grid_n - 1) % 4:
        raise ValueError("grid_n must be >= 9 with grid_n - 1 divisible by 4")
    masses = _cell_masses(Fraction(eta), grid_n)
    assert sum(masses) == 1
    nodes = [Fraction(k, grid_n - 1) for k in range(grid_n)]
    x = np.array([float(v) for v in nodes])
    p = DiscreteMeasure.from_arrays(x[:, None], normalized([float(m) for m in masses]),
                                    box=((0.0, 1.0),))
    q = DiscreteMeasure.from_arrays(np.array([[0.0], [1.0]]), [0.5, 0.5], box=((0.0, 1.0),))
    cost = CostSpec.example62()
    delta = eta / 3
    f = np.full(grid_n, 2.0)
    g = np.array([-delta, delta])
    h = f[:, None] + g[None, :]
    sigma = h - cost.matrix(p, q)
    return Example62Instance(eta, grid_n, p, q, cost, EX62_EPS, delta, h, sigma, f, g)


def _cell_masses(eta: Fraction, grid_n: int) -> list:
    N = grid_n - 1
    half = Fraction(1, 2 * N)
    out = []
    for k in range(grid_n):
        xk = Fraction(k, N)
        lo = max(Fraction(0), xk - half)
        hi = min(Fraction(1), xk + half)
        out.append(_density_cdf(eta, hi) - _density_cdf(eta, lo))
    return out


def example62_tilt(points: np.ndarray, t: float) -> np.ndarray:
    """Reweighting factors turning the eta = 0 grid masses into the eta = t ones."""
    n = points.shape[0]
    base = _cell_masses(Fraction(0), n)
    tilted = _cell_masses(Fraction(t), n)
    return np.array([float(b / a) for a, b in zip(base, tilted)])


def _pos_integral(va: Fraction, vb: Fraction, a: Fraction, b: Fraction, dens: Fraction) -> Fraction:
    """int_a^b (linear from va to vb)_+ * dens dx."""
    if va >= 0 and vb >= 0:
        return dens * (va + vb) / 2 * (b - a)
    if va <= 0 and vb <= 0:
        return Fraction(0)
    root = a + (b - a) * va / (va - vb)
    if va > 0:
        return dens * va / 2 * (root - a)
    return dens * vb / 2 * (b - root)


def analytic_foc_residual(inst: Example62Instance, shift: Sequence[float] = (0.0, 0.0)) -> float:
    """Largest violation of the first-order conditions by the closed-form solution.

    ``shift`` adds constants to h on the fibers y = 0 and y = 1. All
    integrals are evaluated exactly in rational arithmetic.
    """
    eta = Fraction(inst.eta)
    delta = eta / 3
    s0, s1 = Fraction(shift[0]), Fraction(shift[1])
    eps = Fraction(inst.eps)

    def sigma(x, j):
        # h(x, 0) - u(x) and h(x, 1) - (2 - u(x))
        return (2 - delta + s0 - u_exact(x)) if j == 0 else (u_exact(x) + delta + s1)

    # x-line: (1/2)(sigma_0)_+ + (1/2)(sigma_1)_+ is piecewise linear; check at knots
    # and at the zero crossings of each fiber, where its slope changes
    candidates = set(_U_KNOTS)
    for j in (0, 1):
        for a, b in zip(_U_KNOTS, _U_KNOTS[1:]):
            va, vb = sigma(a, j), sigma(b, j)
            if (va > 0) != (vb > 0) and va != vb:
                candidates.add(a + (b - a) * va / (va - vb))
    worst = Fraction(0)
    for x in candidates:
        val = (max(sigma(x, 0), 0) + max(sigma(x, 1), 0)) / 2
        worst = max(worst, abs(val - eps))
    # y-lines: int (sigma(x, j))_+ p_eta(x) dx
    for j in (0, 1):
        total = Fraction(0)
        for a, b in zip(_U_KNOTS, _U_KNOTS[1:]):
            total += _pos_integral(sigma(a, j), sigma(b, j), a, b, density_exact(eta, (a + b) / 2))
        worst = max(worst, abs(total - eps))
    return float(worst)


def fiber_integral(inst: Example62Instance, j: int) -> Fraction:
    """Exact int sigma(x, j) dP_eta(x) of the closed-form slack (no positive part)."""
    eta = Fraction(inst.eta)
    delta = eta / 3
    total = Fraction(0)
    for a, b in zip(_U_KNOTS, _U_KNOTS[1:]):
        if j == 0:
            va, vb = 2 - delta - u_exact(a), 2 - delta - u_exact(b)
        else:
            va, vb = u_exact(a) + delta, u_exact(b) + delta
        total += density_exact(eta, (a + b) / 2) * (va + vb) / 2 * (b - a)
    return total


def exact_dual_objective(inst: Example62Instance) -> float:
    """Phi of the closed-form solution by exact piecewise-polynomial integration.

    With eps = 1 and sigma >= 0 on both fibers, the integrand is
    h - sigma^2 / 2; the square of a linear function integrates exactly by
    Simpson's rule on each piece.
    """
    eta = Fraction(inst.eta)
    delta = eta / 3
    eps = Fraction(inst.eps)
    total = Fraction(0)
    for j, hj in ((0, 2 - delta), (1, 2 + delta)):
        for a, b in zip(_U_KNOTS, _U_KNOTS[1:]):
            def s(x):
                return 2 - delta - u_exact(x) if j == 0 else u_exact(x) + delta
            va, vm, vb = s(a), (s(a) + s(b)) / 2, s(b)
            dens = density_exact(eta, (a + b) / 2)
            sq = (b - a) / 6 * (max(va, 0) ** 2 + 4 * max(vm, 0) ** 2 + max(vb, 0) ** 2)
            total += Fraction(1, 2) * dens * (hj * (b - a) - sq / (2 * eps))
    return float(total)


# --------------------------------------------------------------------------
# Hausdorff distance between unions of horizontal segments


def _seg_dist_pieces(x0: float, seg) -> float:
    y, a, b = seg
    return max(a - x0, 0.0, x0 - b)


def _directed_segments(src: list, dst: list) -> float:
    worst = 0.0
    for y, a, b in src:
        cands = {a, b}
        for (y1, a1, b1), (y2, a2, b2) in itertools.combinations(dst, 2):
            # points where the distances to the two segments agree; on each pair
            # of linear pieces the equation is at most quadratic in x
            e1, e2 = (y - y1) ** 2, (y - y2) ** 2
            for k1, k2 in itertools.product(((a1, -1), (None, 0), (b1, 1)),
                                            ((a2, -1), (None, 0), (b2, 1))):
                cands.update(_equal_distance_roots(k1, k2, e1, e2))
        for x in cands:
            if a - 1e-15 <= x <= b + 1e-15:
                x = min(max(x, a), b)
                d = min(math.hypot(_seg_dist_pieces(x, s), y - s[0]) for s in dst)
                worst = max(worst, d)
    return worst


def _equal_distance_roots(k1, k2, e1, e2) -> list:
    # piece (c, -1): dx = c - x; (None, 0): dx = 0; (c, 1): dx = x - c
    (c1, s1), (c2, s2) = k1, k2
    if s1 == 0 and s2 == 0:
        return []
    if s1 == 0 or s2 == 0:
        c, rhs = (c2, e1 - e2) if s1 == 0 else (c1, e2 - e1)
        if rhs < 0:
            return []
        r = math.sqrt(rhs)
        return [c - r, c + r]
    # (x - c1)^2 + e1 = (x - c2)^2 + e2  ->  linear in x
    if c1 == c2:
        return []
    return [(c2 * c2 - c1 * c1 + e2 - e1) / (2 * (c2 - c1))]


def hausdorff_segments(a: list, b: list) -> float:
    """Exact Hausdorff distance between unions of horizontal segments (y, x0, x1)."""
    return max(_directed_segments(a, b), _directed_segments(b, a))


def support_offset(inst: Example62Instance, mask: np.ndarray) -> float:
    """Largest gap between a discrete support and the analytic segments, fiber by fiber.

    Each fiber of the discrete support must be a contiguous run of grid
    nodes; the result is the largest endpoint deviation from the analytic
    segment on that fiber (inf when a fiber is empty or not contiguous).
    """
    worst = 0.0
    for j, (y, a, b) in enumerate(inst.analytic_support_segments()):
        idx = np.nonzero(mask[:, j])[0]
        if idx.size == 0 or idx[-1] - idx[0] + 1 != idx.size:
            return math.inf
        worst = max(worst, abs(inst.x[idx[0]] - a), abs(inst.x[idx[-1]] - b))
    return worst


# --------------------------------------------------------------------------
# other fixtures


def zero_cost_instance(p: DiscreteMeasure, q: DiscreteMeasure, eps: float):
    """Instance with c = 0 and its reference solution (f, g) = (eps, 0)."""
    cost = CostSpec.from_matrix(p, q, np.zeros((p.n, q.n)), lipschitz=1.0)
    ref = Potentials(np.full(p.n, float(eps)), np.zeros(q.n), float(eps), {"closed_form": 0.0}, 0.0)
    return Instance(p, q, cost, float(eps), "zero-cost"), ref


@dataclass(frozen=True, eq=False)
class QuadraticInstance:
    instance: Instance
    spacing: float
    diam_p: float
    side: float


def quadratic_convex_instance(n: int, d: int = 1, seed: int = 0, eps: float = 0.05,
                              m: int = 5, side: float = 1.0, density_lower: float = 0.5,
                              density_upper: float = 1.5) -> QuadraticInstance:
    """Quadratic cost with P on a uniform grid over the box [0, side]^d.

    ``n`` is the number of grid points per axis. Cell weights are drawn in
    [density_lower, density_upper] times the cell volume and renormalized; Q
    has ``m`` atoms drawn uniformly in the box.
    """
    if n < 2:
        raise ValueError("need at least two grid points per axis")
    rng = np.random.default_rng(seed)
    axis = np.linspace(0.0, side, n)
    grid = np.array(list(itertools.product(axis, repeat=d)))
    raw = rng.uniform(density_lower, density_upper, size=grid.shape[0])
    p = DiscreteMeasure.from_arrays(grid, normalized(raw), box=((0.0, side),) * d)
    qpts = rng.uniform(0.0, side, size=(m, d))
    q = DiscreteMeasure.from_arrays(qpts, normalized(rng.uniform(0.5, 1.5, size=m)),
                                    box=((0.0, side),) * d)
    lip = math.sqrt(2 * d) * side
    cost = CostSpec.sqeuclidean(lip, bound=d * side * side / 2)
    inst = Instance(p, q, cost, eps, f"quadratic(n={n}, d={d}, seed={seed})")
    return QuadraticInstance(inst, side / (n - 1), side * math.sqrt(d), side)


@dataclass(frozen=True, eq=False)
class StabilitySuite:
    params: ClassParams
    base: Instance
    specs: tuple

    def pairs(self) -> list:
        from .harness import perturb
        out = []
        for spec in self.specs:
            for item in perturb(self.base, spec):
                if item.t > 0:
                    out.append((self.base, item.instance))
        return out


def stability_suite(n: int = 10, m: int = 4, seed: int = 0) -> StabilitySuite:
    """Quadratic-cost families inside one shared class where the smallness hypotheses hold.

    The regularization floor is taken just above 8 L D, so the covering
    factors in the uniform constants collapse to one and every Q-ball of
    radius eps/(8L) holds all of Q.
    """
    rng = np.random.default_rng(seed)
    axis = np.linspace(0.0, 1.0, n)
    p = DiscreteMeasure.from_arrays(axis[:, None], normalized(rng.uniform(0.8, 1.2, n)),
                                    box=((0.0, 1.0),))
    p_alt = DiscreteMeasure.from_arrays(axis[:, None], normalized(rng.uniform(0.8, 1.2, n)),
                                        box=((0.0, 1.0),))
    q = DiscreteMeasure.from_arrays(np.sort(rng.uniform(0.1, 0.9, m))[:, None],
                                    normalized(rng.uniform(0.5, 1.5, m)))
    q_alt = DiscreteMeasure.from_arrays(np.sort(rng.uniform(0.1, 0.9, m))[:, None],
                                        normalized(rng.uniform(0.5, 1.5, m)))
    lip = 1.7
    params = ClassParams(eps_lower=8 * lip * 1.01, diam_bound=1.0, lipschitz=lip,
                         density_lower=0.7, density_upper=1.3, cone_const=0.4,
                         ball_mass_lower=1.0)
    cost = CostSpec.sqeuclidean(math.sqrt(2.0), bound=0.5)
    base = Instance(p, q, cost, params.eps_lower, f"suite(seed={seed})")

    from .harness import PerturbationSpec, linear_tilt
    small = (0.0, 0.002, 0.005, 0.01)
    specs = (
        PerturbationSpec("marginal-mixture", small + (0.05,), "P", other=p_alt),
        PerturbationSpec("marginal-mixture", small + (0.05,), "Q", other=q_alt),
        PerturbationSpec("atom-translation", small, "P", vector=(0.05,)),
        PerturbationSpec("atom-translation", small, "Q", vector=(-0.05,)),
        PerturbationSpec("weight-tilt", small, "P", tilt=linear_tilt()),
        PerturbationSpec("weight-tilt", small, "Q", tilt=linear_tilt()),
        PerturbationSpec("cost-scale", small),
        PerturbationSpec("eps-ramp", (0.0, 0.0002, 0.0005, 0.001)),
    )
    return StabilitySuite(params, base, specs)
