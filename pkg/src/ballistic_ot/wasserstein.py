"""Signed transport costs for the bilinear cost <x, y>.

1D optima come from quantile (northwest-corner) couplings. Small 2D or
cross-checking instances go through a dense LP, and tiny ones through
exhaustive enumeration of basic feasible solutions.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import linprog

from .errors import SolverFailure, ValidationError
from .grid_measures import GridMeasure
from .lagrangian import GridFunction, legendre_concave

COMONOTONE = "comonotone"
ANTIMONOTONE = "antimonotone"


@dataclass(frozen=True, eq=False)
class Coupling:
    """Joint weights over the nodes of two grids, rows for mu and columns for nu."""

    row_measure: GridMeasure
    col_measure: GridMeasure
    plan: np.ndarray = field(repr=False)

    def __post_init__(self):
        P = np.asarray(self.plan, dtype=float)
        if P.shape != (self.row_measure.grid.size, self.col_measure.grid.size):
            raise ValidationError("plan shape does not match the marginals")
        P.setflags(write=False)
        object.__setattr__(self, "plan", P)

    def marginal_error(self) -> float:
        return max(np.abs(self.plan.sum(1) - self.row_measure.weights).max(),
                   np.abs(self.plan.sum(0) - self.col_measure.weights).max())

    def cost(self) -> float:
        """Integral of <x, y> against the plan."""
        X = self.row_measure.grid.points
        Y = self.col_measure.grid.points
        return float(np.sum(self.plan * (X @ Y.T)))

    def entries(self):
        """Nonzero entries as (row index, column index, mass)."""
        r, c = np.nonzero(self.plan)
        return r, c, self.plan[r, c]


def _northwest(a: np.ndarray, b: np.ndarray):
    """Northwest-corner rule on two mass vectors; returns (i, j, mass) arrays.

    Built from merged cumulative sums: each interval between consecutive
    breakpoints of the two quantile functions becomes one cell.
    """
    A = np.cumsum(a)
    B = np.cumsum(b)
    A[-1] = B[-1] = 1.0
    q = np.union1d(A, B)
    q = q[q > 0]
    lo = np.concatenate([[0.0], q[:-1]])
    mass = q - lo
    keep = mass > 0
    mid = 0.5 * (lo + q)[keep]
    i = np.minimum(np.searchsorted(A, mid), len(a) - 1)
    j = np.minimum(np.searchsorted(B, mid), len(b) - 1)
    return i, j, mass[keep]


def quantile_coupling(m1: GridMeasure, m2: GridMeasure, orientation: str = COMONOTONE) -> Coupling:
    """Match equal (comonotone) or opposite (antimonotone) quantiles."""
    if m1.grid.dimension != 1 or m2.grid.dimension != 1:
        raise ValidationError("quantile couplings are one-dimensional")
    if orientation not in (COMONOTONE, ANTIMONOTONE):
        raise ValidationError(f"unknown orientation {orientation!r}")
    s1 = m1.support
    s2 = m2.support
    if orientation == ANTIMONOTONE:
        s2 = s2[::-1]
    r, c, w = _northwest(m1.weights[s1], m2.weights[s2])
    P = np.zeros((m1.grid.size, m2.grid.size))
    np.add.at(P, (s1[r], s2[c]), w)
    return Coupling(m1, m2, P)


def lp_transport(mu: GridMeasure, nu: GridMeasure, sense: str = "min"):
    """Optimal <x, y> plan between the supports by a dense LP (HiGHS)."""
    su, sv = mu.support, nu.support
    if su.size * sv.size > 64 * 64:
        raise ValidationError("LP path limited to 64 x 64 supports")
    X = mu.grid.points[su]
    Y = nu.grid.points[sv]
    C = X @ Y.T
    n, m = C.shape
    A = np.zeros((n + m, n * m))
    for i in range(n):
        A[i, i * m:(i + 1) * m] = 1.0
    for j in range(m):
        A[n + j, j::m] = 1.0
    b = np.concatenate([mu.weights[su], nu.weights[sv]])
    c = C.ravel() if sense == "min" else -C.ravel()
    res = linprog(c, A_eq=A[:-1], b_eq=b[:-1], bounds=(0, None), method="highs")
    if res.status != 0:
        raise SolverFailure(f"LP failed: {res.message}")
    P = np.zeros((mu.grid.size, nu.grid.size))
    P[np.ix_(su, sv)] = np.maximum(res.x.reshape(n, m), 0.0)
    cp = Coupling(mu, nu, P)
    return cp.cost(), cp


def enumerate_vertices(mu: GridMeasure, nu: GridMeasure, sense: str = "min"):
    """Exhaustive search over basic feasible plans (supports up to 4 x 4).

    Every vertex of the transport polytope is supported on a spanning tree of
    the bipartite support graph with n + m - 1 cells; each candidate cell set
    is solved as a square linear system and kept when nonnegative.
    """
    su, sv = mu.support, nu.support
    n, m = su.size, sv.size
    if n > 4 or m > 4:
        raise ValidationError("vertex enumeration limited to 4 x 4 supports")
    a, b = mu.weights[su], nu.weights[sv]
    C = mu.grid.points[su] @ nu.grid.points[sv].T
    cells = [(i, j) for i in range(n) for j in range(m)]
    k = n + m - 1
    best, best_plan = None, None
    for subset in itertools.combinations(range(len(cells)), k):
        M = np.zeros((n + m, k))
        for col, idx in enumerate(subset):
            i, j = cells[idx]
            M[i, col] = 1.0
            M[n + j, col] = 1.0
        rhs = np.concatenate([a, b])
        sol, *_ = np.linalg.lstsq(M, rhs, rcond=None)
        if np.abs(M @ sol - rhs).max() > 1e-10 or sol.min() < -1e-12:
            continue
        val = sum(sol[c] * C[cells[idx]] for c, idx in enumerate(subset))
        if best is None or (val < best if sense == "min" else val > best):
            best = val
            best_plan = (subset, sol)
    P = np.zeros((mu.grid.size, nu.grid.size))
    for c, idx in enumerate(best_plan[0]):
        i, j = cells[idx]
        P[su[i], sv[j]] += max(best_plan[1][c], 0.0)
    return float(best), Coupling(mu, nu, P)


def w_min(mu: GridMeasure, nu: GridMeasure):
    """inf over couplings of E<V, X>; V ~ mu (rows), X ~ nu (columns)."""
    if mu.grid.dimension == 1 and nu.grid.dimension == 1:
        cp = quantile_coupling(mu, nu, ANTIMONOTONE)
        return cp.cost(), cp
    return lp_transport(mu, nu, "min")


def w_max(mu: GridMeasure, nu: GridMeasure):
    """sup over couplings of E<V, X>."""
    if mu.grid.dimension == 1 and nu.grid.dimension == 1:
        cp = quantile_coupling(mu, nu, COMONOTONE)
        return cp.cost(), cp
    return lp_transport(mu, nu, "max")


def kantorovich_dual_value(f: GridFunction, mu: GridMeasure, nu: GridMeasure, strict: bool = False) -> float:
    """int f dnu + int f~ dmu with f~ the concave transform over f's grid.

    This is a lower bound on w_min for every f. Flagged transform values are
    replaced by their finite grid-truncated counterparts, which is exact for
    measures supported on the grid; ``strict`` rejects flagged mu-mass instead.
    """
    if f.grid != nu.grid:
        raise ValidationError("f must live on nu's grid")
    if np.any(f.flags[nu.support]):
        raise ValidationError("f must be finite on nu's support")
    v, wv = mu.atoms()
    ft = legendre_concave(f, v)
    if strict and np.any(ft.flags & (wv > 0)):
        raise ValidationError("concave transform is out of domain on mu's support")
    return float(np.dot(nu.weights[nu.support], f.values[nu.support]) + np.dot(wv, ft.truncated))


def kantorovich_lp(mu: GridMeasure, nu: GridMeasure):
    """Dual LP: max int f dnu + int g dmu s.t. f(x) + g(v) <= v x. Returns (value, f on nu's grid)."""
    su, sv = mu.support, nu.support
    V = mu.grid.nodes[su]
    X = nu.grid.nodes[sv]
    n, m = su.size, sv.size
    # variables: g (n), f (m)
    A = np.zeros((n * m, n + m))
    ub = np.empty(n * m)
    for i in range(n):
        for j in range(m):
            A[i * m + j, i] = 1.0
            A[i * m + j, n + j] = 1.0
            ub[i * m + j] = V[i] * X[j]
    c = -np.concatenate([mu.weights[su], nu.weights[sv]])
    res = linprog(c, A_ub=A, b_ub=ub, bounds=(None, None), method="highs")
    if res.status != 0:
        raise SolverFailure(f"dual LP failed: {res.message}")
    fx = res.x[n:]
    # extend off-support by the smallest value compatible with the constraints
    g = res.x[:n]
    full = np.min(np.outer(V, nu.grid.nodes) - g[:, None], axis=0)
    full[sv] = fx
    return -res.fun, GridFunction(nu.grid, full)
