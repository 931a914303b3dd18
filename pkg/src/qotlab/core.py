"""Quadratically regularized OT: dual solver, primal extraction and diagnostics.

The dual is solved by exact block coordinate ascent. Holding ``g`` fixed, the
optimal ``f_i`` is the root of the piecewise-linear equation
``sum_j q_j (f_i + g_j - c_ij)_+ = eps``, which :func:`scalar_foc_solve`
computes exactly by sorting the breakpoints. Sweeps alternate between all
``f`` and all ``g``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .measures import DiscreteMeasure

log = logging.getLogger(__name__)

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 100_000


class NotConvergedError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# costs


def _u62(x):
    x = np.asarray(x, dtype=float)
    return np.where(x <= 0.25, 0.0, np.where(x < 0.5, 6.4 * (x - 0.25), 1.6))


@dataclass(frozen=True, eq=False)
class CostSpec:
    """Transport cost with a declared Lipschitz constant.

    kinds:
      ``sqeuclidean``  c(x, y) = scale * |x - y|^2 / 2
      ``matrix``       explicit table on fixed atoms, looked up by exact coordinates
      ``example62``    c(x, 0) = u(x), c(x, 1) = 2 - u(x) on [0, 1] x {0, 1}
    """

    kind: str
    lipschitz: float
    scale: float = 1.0
    bound: Optional[float] = None
    table_x: Optional[np.ndarray] = None
    table_y: Optional[np.ndarray] = None
    table: Optional[np.ndarray] = None
    _xi: dict = field(default_factory=dict, repr=False)
    _yi: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.kind not in ("sqeuclidean", "matrix", "example62"):
            raise ValueError(f"unknown cost kind {self.kind!r}")
        if not self.lipschitz > 0:
            raise ValueError("lipschitz must be positive")
        if self.kind == "matrix":
            if self.table is None or self.table_x is None or self.table_y is None:
                raise ValueError("matrix cost needs table, table_x and table_y")
            tx = np.atleast_2d(np.asarray(self.table_x, dtype=float))
            ty = np.atleast_2d(np.asarray(self.table_y, dtype=float))
            if tx.shape[0] == 1 and np.asarray(self.table_x).ndim == 1:
                tx = tx.T
            if ty.shape[0] == 1 and np.asarray(self.table_y).ndim == 1:
                ty = ty.T
            tab = np.asarray(self.table, dtype=float)
            if tab.shape != (tx.shape[0], ty.shape[0]):
                raise ValueError("table: shape does not match table_x/table_y")
            object.__setattr__(self, "table_x", tx)
            object.__setattr__(self, "table_y", ty)
            object.__setattr__(self, "table", tab)
            self._xi.update({tuple(r): i for i, r in enumerate(tx.tolist())})
            self._yi.update({tuple(r): j for j, r in enumerate(ty.tolist())})

    @classmethod
    def sqeuclidean(cls, lipschitz: float, scale: float = 1.0, bound=None) -> "CostSpec":
        return cls("sqeuclidean", lipschitz, scale, bound)

    @classmethod
    def example62(cls) -> "CostSpec":
        return cls("example62", 32 / 5, 1.0, 2.0)

    @classmethod
    def from_matrix(cls, p: DiscreteMeasure, q: DiscreteMeasure, matrix, lipschitz=None,
                    scale: float = 1.0) -> "CostSpec":
        """Explicit cost on the atoms of (p, q); Lipschitz constant computed if not given."""
        matrix = np.asarray(matrix, dtype=float)
        if lipschitz is None:
            lipschitz = max(empirical_lipschitz(p.points, q.points, matrix), 1e-300)
        return cls("matrix", float(lipschitz), scale, None, p.points, q.points, matrix)

    def scaled(self, factor: float) -> "CostSpec":
        bound = None if self.bound is None else self.bound * factor
        return replace(self, scale=self.scale * factor, lipschitz=self.lipschitz * factor,
                       bound=bound, _xi=self._xi, _yi=self._yi)

    def evaluate(self, x, y) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = np.atleast_2d(np.asarray(y, dtype=float))
        if self.kind == "sqeuclidean":
            diff = x[:, None, :] - y[None, :, :]
            return self.scale * 0.5 * np.sum(diff * diff, axis=2)
        if self.kind == "example62":
            yv = y[:, 0]
            if not np.all((yv == 0.0) | (yv == 1.0)):
                raise ValueError("example62 cost is defined for y in {0, 1} only")
            u = _u62(x[:, 0])[:, None]
            return self.scale * np.where(yv[None, :] == 0.0, u, 2.0 - u)
        try:
            ii = [self._xi[tuple(r)] for r in x.tolist()]
            jj = [self._yi[tuple(r)] for r in y.tolist()]
        except KeyError as exc:
            raise ValueError(f"matrix cost is not defined at atom {exc.args[0]}") from None
        return self.scale * self.table[np.ix_(ii, jj)]

    def evaluate_pairs(self, x, y) -> np.ndarray:
        """c(x_k, y_k) for matched rows."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = np.atleast_2d(np.asarray(y, dtype=float))
        if self.kind == "sqeuclidean":
            return self.scale * 0.5 * np.sum((x - y) ** 2, axis=1)
        return np.array([self.evaluate(a[None], b[None])[0, 0] for a, b in zip(x, y)])

    def matrix(self, p: DiscreteMeasure, q: DiscreteMeasure) -> np.ndarray:
        return self.evaluate(p.points, q.points)

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "lipschitz": self.lipschitz, "scale": self.scale}
        if self.bound is not None:
            out["bound"] = self.bound
        if self.kind == "matrix":
            out["table_x"] = self.table_x.tolist()
            out["table_y"] = self.table_y.tolist()
            out["table"] = self.table.tolist()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "CostSpec":
        kind = data.get("kind")
        if kind == "example62":
            return cls.example62().scaled(float(data.get("scale", 1.0)))
        if "lipschitz" not in data:
            raise ValueError("cost: missing field 'lipschitz'")
        if kind == "sqeuclidean":
            return cls.sqeuclidean(float(data["lipschitz"]), float(data.get("scale", 1.0)),
                                   data.get("bound"))
        if kind == "matrix":
            for key in ("table", "table_x", "table_y"):
                if key not in data:
                    raise ValueError(f"cost: missing field '{key}'")
            return cls("matrix", float(data["lipschitz"]), float(data.get("scale", 1.0)),
                       data.get("bound"), data["table_x"], data["table_y"], data["table"])
        raise ValueError(f"cost: unknown kind {kind!r}")


def empirical_lipschitz(x: np.ndarray, y: np.ndarray, c: np.ndarray) -> float:
    """Largest |c(z) - c(z')| / |z - z'| over all support-point pairs."""
    n, m = c.shape
    z = np.hstack([np.repeat(x, m, axis=0), np.tile(y, (n, 1))])
    cv = c.ravel()
    diff = z[:, None, :] - z[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=2))
    dc = np.abs(cv[:, None] - cv[None, :])
    mask = dist > 0
    return float(np.max(dc[mask] / dist[mask])) if mask.any() else 0.0


# --------------------------------------------------------------------------
# solution containers


@dataclass(frozen=True, eq=False)
class Potentials:
    f: np.ndarray
    g: np.ndarray
    eps: float
    normalization: dict = field(default_factory=dict)
    foc_residual_inf: float = math.nan
    converged: bool = True
    sweeps: int = 0
    phi_trace: tuple = ()

    def h(self) -> np.ndarray:
        return self.f[:, None] + self.g[None, :]

    def shifted(self, a: float, label: str = "shift") -> "Potentials":
        """(f + a, g - a); the sum h is unchanged."""
        norm = dict(self.normalization)
        norm[label] = norm.get(label, 0.0) + a
        return replace(self, f=self.f + a, g=self.g - a, normalization=norm)


@dataclass(frozen=True, eq=False)
class Coupling:
    zeta: np.ndarray
    mass: np.ndarray
    p: DiscreteMeasure
    q: DiscreteMeasure
    support_tol: float = 0.0


# --------------------------------------------------------------------------
# scalar first-order condition


def _foc_rows(offsets: np.ndarray, weights: np.ndarray, eps: float) -> np.ndarray:
    """Row-wise root t of sum_j w_j (t + b_j)_+ = eps for a (k, m) offset array."""
    order = np.argsort(-offsets, axis=1, kind="stable")
    b = np.take_along_axis(offsets, order, axis=1)
    w = weights[order]
    cum_w = np.cumsum(w, axis=1)
    cum_wb = np.cumsum(w * b, axis=1)
    # F at the next breakpoint t = -b_{k+1}, with the top k+1 offsets active
    f_next = cum_wb[:, :-1] - b[:, 1:] * cum_w[:, :-1]
    hit = np.concatenate([f_next >= eps, np.ones((b.shape[0], 1), dtype=bool)], axis=1)
    k = np.argmax(hit, axis=1)
    rows = np.arange(b.shape[0])
    return (eps - cum_wb[rows, k]) / cum_w[rows, k]


def scalar_foc_solve(offsets, weights, eps: float) -> float:
    """Unique t with sum_j q_j (t + b_j)_+ = eps.

    The left side is piecewise linear and nondecreasing in t, strictly
    increasing to the right of the largest breakpoint -b_j, so sorting the
    breakpoints and solving the linear piece that contains eps is exact up to
    rounding. Tied offsets need no special handling.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    b = np.asarray(offsets, dtype=float).reshape(1, -1)
    w = np.asarray(weights, dtype=float).ravel()
    return float(_foc_rows(b, w, eps)[0])


def foc_function(t: float, offsets, weights) -> float:
    return float(np.dot(weights, np.maximum(t + np.asarray(offsets), 0.0)))


# --------------------------------------------------------------------------
# objective, residuals, gradients


def _slack(f, g, c):
    return f[:, None] + g[None, :] - c


def dual_objective(pot: Potentials, p: DiscreteMeasure, q: DiscreteMeasure, cost) -> float:
    c = _as_matrix(cost, p, q)
    h = pot.h()
    pos = np.maximum(h - c, 0.0)
    integrand = h - pos * pos / (2 * pot.eps)
    return float(p.weights @ integrand @ q.weights)


def foc_residuals(pot: Potentials, p, q, cost) -> tuple[np.ndarray, np.ndarray]:
    """Residuals 1 - (1/eps) int (h - c)_+ against each marginal."""
    c = _as_matrix(cost, p, q)
    pos = np.maximum(_slack(pot.f, pot.g, c), 0.0)
    r_p = 1.0 - (pos @ q.weights) / pot.eps
    r_q = 1.0 - (p.weights @ pos) / pot.eps
    return r_p, r_q


def _abs_foc_residual(f, g, c, p, q, eps) -> float:
    pos = np.maximum(_slack(f, g, c), 0.0)
    return float(max(np.max(np.abs(pos @ q.weights - eps)),
                     np.max(np.abs(p.weights @ pos - eps))))


def sumspace_projection(r: np.ndarray, p: DiscreteMeasure, q: DiscreteMeasure):
    """Orthogonal projection of r onto {u (+) v} in L2(P x Q).

    The normal equations read u_i + <v, q> = <r_i., q> and <u, p> + v_j =
    <p, r_.j>; with the gauge <v, q> = 0 they decouple into row means and
    centred column means.
    """
    u = r @ q.weights
    v = p.weights @ r - p.weights @ u
    return u, v


def gradient_norm_sumspace(pot: Potentials, p, q, cost) -> float:
    """L2(P x Q) norm of the sum-space gradient of the dual objective."""
    c = _as_matrix(cost, p, q)
    r = 1.0 - np.maximum(pot.h() - c, 0.0) / pot.eps
    u, v = sumspace_projection(r, p, q)
    proj = u[:, None] + v[None, :]
    return float(math.sqrt(max(p.weights @ (proj * proj) @ q.weights, 0.0)))


def balanced_decomposition(w: np.ndarray, p: DiscreteMeasure, q: DiscreteMeasure):
    """Balanced split w ~ u (+) v with int u dP = int v dQ = mean(w)/2."""
    w = np.asarray(w, dtype=float)
    wbar = float(p.weights @ w @ q.weights)
    u = w @ q.weights - wbar / 2
    v = p.weights @ w - wbar / 2
    return u, v


# --------------------------------------------------------------------------
# solver


def _as_matrix(cost, p, q) -> np.ndarray:
    if isinstance(cost, CostSpec):
        return cost.matrix(p, q)
    return np.asarray(cost, dtype=float)


def solve_dual(p: DiscreteMeasure, q: DiscreteMeasure, cost, eps: float,
               tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER,
               normalization: str = "g_mean_zero", init_g=None,
               polish: bool = True, check_monotone: bool = True) -> Potentials:
    """Alternating exact coordinate ascent on the dual.

    Converged once the largest absolute first-order residual
    ``|sum_j q_j (h_ij - c_ij)_+ - eps|`` (over rows and columns) is <= tol.
    With ``polish`` the sweeps then continue until the residual stops
    improving, so that the extracted coupling is feasible to rounding level.
    A non-converged run returns the last iterate with ``converged=False``.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    c = _as_matrix(cost, p, q)
    pw, qw = p.weights, q.weights
    g = np.zeros(q.n) if init_g is None else np.array(init_g, dtype=float)
    f = _foc_rows(g[None, :] - c, qw, eps)
    phi = []
    residual = math.inf
    best = (math.inf, f, g)
    stall = 0
    sweeps = 0
    for sweeps in range(1, max_iter + 1):
        g = _foc_rows((f[:, None] - c).T, pw, eps)
        f = _foc_rows(g[None, :] - c, qw, eps)
        pos = np.maximum(_slack(f, g, c), 0.0)
        # after the f-update the row conditions hold up to rounding
        residual = float(max(np.max(np.abs(pw @ pos - eps)),
                             np.max(np.abs(pos @ qw - eps))))
        value = float(pw @ (f[:, None] + g[None, :] - pos * pos / (2 * eps)) @ qw)
        if check_monotone and phi and value < phi[-1] - 1e-12 * max(1.0, abs(value)):
            log.warning("dual objective decreased by %.3e at sweep %d", phi[-1] - value, sweeps)
        phi.append(value)
        if residual < best[0]:
            stall = 0
            best = (residual, f, g)
        else:
            stall += 1
        if residual <= tol and (not polish or stall >= 3 or residual == 0.0):
            break
    residual, f, g = best
    converged = residual <= tol
    if not converged:
        log.warning("solve_dual: residual %.3e after %d sweeps", residual, sweeps)
    pot = Potentials(f, g, eps, {}, residual, converged, sweeps, tuple(phi))
    return normalize(pot, q, normalization)


def normalize(pot: Potentials, q: DiscreteMeasure, normalization: str = "g_mean_zero") -> Potentials:
    if normalization in (None, "none"):
        return pot
    if normalization != "g_mean_zero":
        raise ValueError(f"unknown normalization {normalization!r}")
    s = float(q.weights @ pot.g)
    out = pot.shifted(s, "g_mean_zero")
    # exact zero mean after rounding is not needed; record the achieved value
    out.normalization["g_mean"] = float(q.weights @ out.g)
    return out


def align_gauge(ref: Potentials, other: Potentials, q_ref: DiscreteMeasure,
                g_other_on_ref: np.ndarray) -> tuple[float, Potentials]:
    """Shift ``other`` by a = int (g' - g) dQ so its potentials compare with ``ref``.

    ``g_other_on_ref`` is g' evaluated on the atoms of Q (via extension when
    the supports differ). Returns ``(a, shifted other)`` where the shifted
    pair is (f' + a, g' - a).
    """
    a = float(q_ref.weights @ (g_other_on_ref - ref.g))
    return a, other.shifted(a, "align")


# --------------------------------------------------------------------------
# primal side


def extract_coupling(pot: Potentials, p, q, cost, support_tol: Optional[float] = None,
                     require_converged: bool = True) -> Coupling:
    if require_converged and not pot.converged:
        raise NotConvergedError(
            f"potentials did not converge (residual {pot.foc_residual_inf:.3e})")
    c = _as_matrix(cost, p, q)
    zeta = np.maximum(pot.h() - c, 0.0) / pot.eps
    mass = zeta * np.outer(p.weights, q.weights)
    if support_tol is None:
        support_tol = 1e-10 * float(zeta.max())
    return Coupling(zeta, mass, p, q, support_tol)


def support_mask(coup: Coupling) -> np.ndarray:
    return coup.zeta > coup.support_tol


def extract_support(coup: Coupling) -> np.ndarray:
    """Rows (x_i, y_j) of the support, concatenated into R^{2d}."""
    ii, jj = np.nonzero(support_mask(coup))
    return np.hstack([coup.p.points[ii], coup.q.points[jj]])


def product_points(p: DiscreteMeasure, q: DiscreteMeasure) -> np.ndarray:
    n, m = p.n, q.n
    return np.hstack([np.repeat(p.points, m, axis=0), np.tile(q.points, (n, 1))])


def primal_value(coup: Coupling, cost, eps: float) -> float:
    c = _as_matrix(cost, coup.p, coup.q)
    pq = np.outer(coup.p.weights, coup.q.weights)
    return float(np.sum(coup.mass * c) + 0.5 * eps * np.sum(pq * coup.zeta ** 2))


def duality_gap(coup: Coupling, pot: Potentials, p, q, cost) -> float:
    return primal_value(coup, cost, pot.eps) - dual_objective(pot, p, q, cost)


def marginal_errors(coup: Coupling) -> tuple[float, float]:
    return (float(np.max(np.abs(coup.mass.sum(axis=1) - coup.p.weights))),
            float(np.max(np.abs(coup.mass.sum(axis=0) - coup.q.weights))))


# --------------------------------------------------------------------------
# extension off the support


def extend_f(pot: Potentials, q: DiscreteMeasure, cost, x) -> np.ndarray:
    """f at arbitrary points x via the first-order condition against Q."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    c = cost.evaluate(x, q.points) if isinstance(cost, CostSpec) else cost(x, q.points)
    return _foc_rows(pot.g[None, :] - c, q.weights, pot.eps)


def extend_g(pot: Potentials, p: DiscreteMeasure, cost, y) -> np.ndarray:
    """g at arbitrary points y via the first-order condition against P."""
    y = np.atleast_2d(np.asarray(y, dtype=float))
    c = cost.evaluate(p.points, y) if isinstance(cost, CostSpec) else cost(p.points, y)
    return _foc_rows((pot.f[:, None] - c).T, p.weights, pot.eps)


def extend_potential(pot: Potentials, marginal: DiscreteMeasure, cost, x, side: str = "f"):
    """Scalar or vector extension of f (``side='f'``, marginal Q) or g (marginal P)."""
    x = np.asarray(x, dtype=float)
    scalar = x.ndim <= 1 and (x.ndim == 0 or x.shape[0] == marginal.dim) and marginal.dim >= 1
    pts = x.reshape(1, -1) if scalar else np.atleast_2d(x)
    if side == "f":
        out = extend_f(pot, marginal, cost, pts)
    elif side == "g":
        out = extend_g(pot, marginal, cost, pts)
    else:
        raise ValueError("side must be 'f' or 'g'")
    return float(out[0]) if scalar else out


def h_on(pot: Potentials, p: DiscreteMeasure, q: DiscreteMeasure, cost, x, y) -> np.ndarray:
    """h = f (+) g on the grid x by y, extending both potentials."""
    return extend_f(pot, q, cost, x)[:, None] + extend_g(pot, p, cost, y)[None, :]


def solution_to_dict(pot: Potentials, coup: Coupling, cost, p, q) -> dict:
    """JSON-ready solution record; dense density up to 1e6 entries, sparse above."""
    zeta = coup.zeta
    if zeta.size <= 1_000_000:
        density = {"format": "dense", "zeta": zeta.tolist()}
    else:
        ii, jj = np.nonzero(zeta)
        density = {"format": "sparse", "i": ii.tolist(), "j": jj.tolist(),
                   "zeta": zeta[ii, jj].tolist()}
    return {
        "eps": pot.eps,
        "f": pot.f.tolist(),
        "g": pot.g.tolist(),
        "normalization": pot.normalization,
        "density": density,
        "support": np.argwhere(support_mask(coup)).tolist(),
        "dual_objective": dual_objective(pot, p, q, cost),
        "primal_value": primal_value(coup, cost, pot.eps),
        "duality_gap": duality_gap(coup, pot, p, q, cost),
        "convergence": {
            "converged": pot.converged,
            "sweeps": pot.sweeps,
            "foc_residual_inf": pot.foc_residual_inf,
            "phi_trace": list(pot.phi_trace),
        },
    }


# --------------------------------------------------------------------------
# instances


@dataclass(frozen=True, eq=False)
class Instance:
    """A data quadruple (P, Q, c, eps)."""

    p: DiscreteMeasure
    q: DiscreteMeasure
    cost: CostSpec
    eps: float
    label: str = ""

    def cost_matrix(self) -> np.ndarray:
        return self.cost.matrix(self.p, self.q)

    def content_hash(self) -> str:
        import hashlib
        import json

        h = hashlib.sha256()
        for arr in (self.p.points, self.p.weights, self.q.points, self.q.weights,
                    self.cost_matrix()):
            h.update(np.ascontiguousarray(arr, dtype=float).tobytes())
        h.update(json.dumps([self.eps, self.cost.kind, self.cost.lipschitz,
                             self.cost.scale]).encode())
        return h.hexdigest()

    def to_dict(self) -> dict:
        return {"label": self.label, "eps": self.eps, "p": self.p.to_dict(),
                "q": self.q.to_dict(), "cost": self.cost.to_dict()}

    @classmethod
    def from_dict(cls, data: dict) -> "Instance":
        for key in ("p", "q", "cost", "eps"):
            if key not in data:
                raise ValueError(f"instance: missing field '{key}'")
        eps = float(data["eps"])
        if not eps > 0:
            raise ValueError("eps: must be positive")
        return cls(DiscreteMeasure.from_dict(data["p"]), DiscreteMeasure.from_dict(data["q"]),
                   CostSpec.from_dict(data["cost"]), eps, data.get("label", ""))
