"""Discrete probability measures and the metrics used to compare them.

All metrics are exact: W1 is solved as a linear program (closed form in one
dimension), total variation matches atoms by exact coordinates, and
Hausdorff distances are brute-force over all point pairs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linprog
from scipy.spatial.distance import cdist

WEIGHT_SUM_TOL = 1e-12


class MeasureError(ValueError):
    """Raised when a DiscreteMeasure violates one of its invariants."""


@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    """Weighted point cloud in R^d.

    ``points`` has shape ``(n, d)`` and ``weights`` shape ``(n,)``. The arrays
    are made read-only on construction; call :func:`validate_measure` (or use
    :meth:`from_arrays`) to enforce the invariants.
    """

    points: np.ndarray
    weights: np.ndarray
    box: Optional[tuple] = field(default=None)

    def __post_init__(self):
        pts = np.array(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        w = np.array(self.weights, dtype=float).ravel()
        pts.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @classmethod
    def from_arrays(cls, points, weights, box=None) -> "DiscreteMeasure":
        m = cls(points, weights, box)
        validate_measure(m)
        return m

    @classmethod
    def uniform(cls, points, box=None) -> "DiscreteMeasure":
        pts = np.array(points, dtype=float)
        n = pts.shape[0]
        return cls.from_arrays(pts, np.full(n, 1.0 / n), box)

    @classmethod
    def dirac(cls, point) -> "DiscreteMeasure":
        return cls.from_arrays(np.atleast_2d(np.asarray(point, dtype=float)), [1.0])

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def diameter(self) -> float:
        if self.n < 2:
            return 0.0
        return float(cdist(self.points, self.points).max())

    def atom_keys(self) -> list:
        return [tuple(row) for row in self.points.tolist()]

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "points": self.points.tolist(),
            "weights": self.weights.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DiscreteMeasure":
        for key in ("points", "weights"):
            if key not in data:
                raise MeasureError(f"missing field '{key}'")
        try:
            pts = np.array(data["points"], dtype=float)
        except (TypeError, ValueError) as exc:
            raise MeasureError(f"points: {exc}") from exc
        try:
            w = np.array(data["weights"], dtype=float)
        except (TypeError, ValueError) as exc:
            raise MeasureError(f"weights: {exc}") from exc
        if pts.ndim == 1:
            pts = pts[:, None]
        dim = data.get("dim", pts.shape[1])
        if pts.shape[1] != dim:
            raise MeasureError(f"dim: declared {dim} but points have {pts.shape[1]} coordinates")
        if w.ndim != 1 or w.shape[0] != pts.shape[0]:
            raise MeasureError("weights: length does not match number of points")
        box = data.get("box")
        return cls.from_arrays(pts, w, tuple(map(tuple, box)) if box else None)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "DiscreteMeasure":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class ClassParams:
    """Structural constants of an admissible data class.

    Per-instance overrides ``delta_p``, ``lambda_p`` and ``Lambda_p`` default
    to the class-level values when left as ``None``.
    """

    eps_lower: float
    diam_bound: float
    lipschitz: float
    density_lower: float
    density_upper: float
    cone_const: float
    ball_mass_lower: float
    dim: int = 1
    delta_p: Optional[float] = None
    lambda_p: Optional[float] = None
    Lambda_p: Optional[float] = None

    def __post_init__(self):
        for name in ("eps_lower", "diam_bound", "lipschitz", "density_lower",
                     "density_upper", "cone_const", "ball_mass_lower"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be a positive finite number, got {v!r}")
        if self.density_lower > self.density_upper:
            raise ValueError("density_lower must not exceed density_upper")
        if self.cone_const > 1 or self.ball_mass_lower > 1:
            raise ValueError("cone_const and ball_mass_lower must lie in (0, 1]")
        if int(self.dim) < 1:
            raise ValueError("dim must be >= 1")

    @property
    def instance_delta(self) -> float:
        return self.cone_const if self.delta_p is None else self.delta_p

    @property
    def instance_lambda(self) -> float:
        return self.density_lower if self.lambda_p is None else self.lambda_p

    @property
    def instance_Lambda(self) -> float:
        return self.density_upper if self.Lambda_p is None else self.Lambda_p

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v is not None}

    @classmethod
    def from_dict(cls, data: dict) -> "ClassParams":
        required = ("eps_lower", "diam_bound", "lipschitz", "density_lower",
                    "density_upper", "cone_const", "ball_mass_lower")
        for key in required:
            if key not in data:
                raise ValueError(f"missing class parameter '{key}'")
        known = required + ("dim", "delta_p", "lambda_p", "Lambda_p")
        return cls(**{k: data[k] for k in known if k in data})


def validate_measure(m: DiscreteMeasure) -> None:
    """Raise :class:`MeasureError` naming the first violated invariant."""
    if m.points.ndim != 2 or m.points.shape[0] == 0:
        raise MeasureError("points: expected a non-empty (n, d) array")
    if m.weights.shape != (m.points.shape[0],):
        raise MeasureError("weights: length does not match number of points")
    if not np.all(np.isfinite(m.points)):
        raise MeasureError("points: non-finite coordinate")
    if not np.all(np.isfinite(m.weights)) or np.any(m.weights <= 0):
        raise MeasureError("weights: every weight must be strictly positive")
    total = math.fsum(m.weights.tolist())
    if abs(total - 1.0) > WEIGHT_SUM_TOL:
        raise MeasureError(f"weights: sum to {total!r}, not 1")
    if len(set(m.atom_keys())) != m.n:
        raise MeasureError("points: duplicate point")
    if m.box is not None:
        lo = np.array([b[0] for b in m.box], dtype=float)
        hi = np.array([b[1] for b in m.box], dtype=float)
        if np.any(m.points < lo) or np.any(m.points > hi):
            raise MeasureError("points: outside the declared ambient box")


def _check_dims(mu: DiscreteMeasure, nu: DiscreteMeasure) -> None:
    if mu.dim != nu.dim:
        raise MeasureError(f"dimension mismatch: {mu.dim} vs {nu.dim}")


def _w1_line(x, a, y, b) -> float:
    grid = np.union1d(x, y)
    fa = np.zeros(grid.size)
    fb = np.zeros(grid.size)
    np.add.at(fa, np.searchsorted(grid, x), a)
    np.add.at(fb, np.searchsorted(grid, y), b)
    gap = np.abs(np.cumsum(fa) - np.cumsum(fb))[:-1]
    return float(np.dot(gap, np.diff(grid)))


def transport_lp(a: np.ndarray, b: np.ndarray, cost: np.ndarray) -> tuple[float, np.ndarray]:
    """Exact discrete optimal transport by the dual simplex method.

    Returns ``(value, plan)``. The plan is a basic optimal solution.
    """
    n, m = cost.shape
    rows = np.kron(np.eye(n), np.ones(m))
    cols = np.kron(np.ones(n), np.eye(m))
    a_eq = np.vstack([rows, cols])[:-1]
    b_eq = np.concatenate([a, b])[:-1]
    res = linprog(
        cost.ravel(), A_eq=a_eq, b_eq=b_eq, bounds=(0, None), method="highs-ds",
        options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10},
    )
    if res.status != 0:
        raise RuntimeError(f"transport LP failed: {res.message}")
    plan = np.maximum(res.x.reshape(n, m), 0.0)
    return float(np.sum(plan * cost)), plan


def wasserstein1(mu: DiscreteMeasure, nu: DiscreteMeasure) -> float:
    """Exact 1-Wasserstein distance under the Euclidean ground metric."""
    _check_dims(mu, nu)
    if mu.dim == 1:
        return _w1_line(mu.points[:, 0], mu.weights, nu.points[:, 0], nu.weights)
    return transport_lp(mu.weights, nu.weights, cdist(mu.points, nu.points))[0]


def wasserstein1_points(x: np.ndarray, a: np.ndarray, y: np.ndarray, b: np.ndarray) -> float:
    """W1 between weighted point sets without measure validation (zero weights allowed)."""
    x = np.atleast_2d(x)
    y = np.atleast_2d(y)
    keep_a, keep_b = a > 0, b > 0
    x, a, y, b = x[keep_a], a[keep_a], y[keep_b], b[keep_b]
    if x.shape[1] == 1:
        return _w1_line(x[:, 0], a, y[:, 0], b)
    return transport_lp(a / a.sum(), b / b.sum(), cdist(x, y))[0]


def merged_weights(mu: DiscreteMeasure, nu: DiscreteMeasure):
    """Union atom set with both weight vectors on it (zeros where absent)."""
    _check_dims(mu, nu)
    index: dict = {}
    for key in mu.atom_keys() + nu.atom_keys():
        index.setdefault(key, len(index))
    wa = np.zeros(len(index))
    wb = np.zeros(len(index))
    wa[[index[k] for k in mu.atom_keys()]] = mu.weights
    wb[[index[k] for k in nu.atom_keys()]] = nu.weights
    pts = np.array(list(index.keys()), dtype=float).reshape(len(index), mu.dim)
    return pts, wa, wb


def total_variation(mu: DiscreteMeasure, nu: DiscreteMeasure) -> float:
    """sup_A |mu(A) - nu(A)|, i.e. half the L1 distance on the merged atoms."""
    _, wa, wb = merged_weights(mu, nu)
    return min(1.0, 0.5 * math.fsum(np.abs(wa - wb).tolist()))


def ball_masses(m: DiscreteMeasure, centers: np.ndarray, r: float) -> np.ndarray:
    """Mass of the open balls B_r(c) for each row c of ``centers``."""
    dist = cdist(np.atleast_2d(centers), m.points)
    return (dist < r) @ m.weights


def min_ball_mass(q: DiscreteMeasure, r: float) -> float:
    """inf over support points y of Q(B_r(y)), open Euclidean balls."""
    if not r > 0:
        raise ValueError(f"radius must be positive, got {r}")
    return float(ball_masses(q, q.points, r).min())


def directed_hausdorff(a: np.ndarray, b: np.ndarray) -> float:
    return float(cdist(a, b).min(axis=1).max())


def hausdorff_distance(a, b) -> float:
    """Hausdorff distance between finite point sets (rows are points)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("Hausdorff distance of an empty set is undefined")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    d = cdist(a, b)
    return float(max(d.min(axis=1).max(), d.min(axis=0).max()))


@dataclass
class AuditItem:
    item: str
    status: str  # "pass" | "fail" | "declared"
    detail: str = ""
    value: Optional[float] = None
    threshold: Optional[float] = None


@dataclass
class AuditReport:
    items: list

    @property
    def ok(self) -> bool:
        return all(it.status != "fail" for it in self.items)

    def status(self, item: str) -> str:
        for it in self.items:
            if it.item == item:
                return it.status
        raise KeyError(item)

    def to_dict(self) -> dict:
        return {"ok": self.ok, "items": [it.__dict__ for it in self.items]}


def _radius_grid(p: DiscreteMeasure, diam: float, count: int = 40) -> np.ndarray:
    if p.n > 1:
        d = cdist(p.points, p.points)
        smallest = d[d > 0].min()
    else:
        smallest = 1.0
    return np.geomspace(smallest / 4, 2 * max(diam, 1.0), count)


def audit_class_membership(p, q, cost, eps: float, params: ClassParams,
                           n_lipschitz_samples: int = 2000, seed: int = 0) -> AuditReport:
    """Check the testable conditions of class membership at the discrete scale.

    Convexity and density bounds cannot hold for atomic measures; they are
    reported as ``declared``.
    """
    items = []
    items.append(AuditItem(
        "a", "pass" if eps >= params.eps_lower else "fail",
        "eps >= eps_lower", eps, params.eps_lower))

    # (b): declared constant, then a sampled check over support-point pairs
    lip_ok = cost.lipschitz <= params.lipschitz * (1 + 1e-12)
    rng = np.random.default_rng(seed)
    xs, ys = p.points, q.points
    i1 = rng.integers(p.n, size=n_lipschitz_samples)
    i2 = rng.integers(p.n, size=n_lipschitz_samples)
    j1 = rng.integers(q.n, size=n_lipschitz_samples)
    j2 = rng.integers(q.n, size=n_lipschitz_samples)
    c1 = cost.evaluate_pairs(xs[i1], ys[j1])
    c2 = cost.evaluate_pairs(xs[i2], ys[j2])
    dz = np.sqrt(np.sum((xs[i1] - xs[i2]) ** 2, axis=1) + np.sum((ys[j1] - ys[j2]) ** 2, axis=1))
    moved = dz > 0
    worst = float(np.max(np.abs(c1 - c2)[moved] / dz[moved])) if moved.any() else 0.0
    lip_ok = lip_ok and worst <= params.lipschitz * (1 + 1e-9)
    items.append(AuditItem("b", "pass" if lip_ok else "fail",
                           "sampled Lipschitz ratio", worst, params.lipschitz))

    diam = p.diameter()
    items.append(AuditItem("c", "declared",
                           "convexity of the support is a configuration declaration; diameter checked",
                           diam, params.diam_bound))
    if diam > params.diam_bound * (1 + 1e-12):
        items.append(AuditItem("c-diam", "fail", "diam(support P) <= D", diam, params.diam_bound))
    else:
        items.append(AuditItem("c-diam", "pass", "diam(support P) <= D", diam, params.diam_bound))
    items.append(AuditItem("d", "declared",
                           "density bounds are a configuration declaration (atomic measure)",
                           None, None))

    d = params.dim
    worst_ratio = math.inf
    for r in _radius_grid(p, diam):
        masses = ball_masses(p, p.points, r)
        need = params.cone_const * min(r ** d, 1.0)
        worst_ratio = min(worst_ratio, float(masses.min() / need))
    items.append(AuditItem("e", "pass" if worst_ratio >= 1 - 1e-12 else "fail",
                           "min over grid of P(B_r(x)) / (delta min(r^d, 1))", worst_ratio, 1.0))

    qmass = min_ball_mass(q, params.eps_lower / (8 * params.lipschitz))
    items.append(AuditItem("f", "pass" if qmass >= params.ball_mass_lower else "fail",
                           "inf_y Q(B_{eps_lower/(8L)}(y)) >= q_lower", qmass, params.ball_mass_lower))
    return AuditReport(items)


def mixture(mu: DiscreteMeasure, nu: DiscreteMeasure, t: float) -> DiscreteMeasure:
    """(1 - t) mu + t nu on the union atom set; zero-weight atoms are dropped."""
    pts, wa, wb = merged_weights(mu, nu)
    w = (1 - t) * wa + t * wb
    keep = w > 0
    w = w[keep]
    return DiscreteMeasure.from_arrays(pts[keep], w / math.fsum(w.tolist()), mu.box)


def normalized(weights: Sequence[float]) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    w = w / math.fsum(w.tolist())
    # push the rounding residue onto the largest weight
    w[np.argmax(w)] += 1.0 - math.fsum(w.tolist())
    return w
