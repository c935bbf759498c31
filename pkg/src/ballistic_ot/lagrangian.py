"""Lagrangians, Hamiltonians, discrete Legendre transforms and assumption checks."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import NonFiniteData, ValidationError, VelocityOutOfRange
from .grid_measures import SpaceGrid

QUADRATIC = "quadratic_with_potential"
TABULATED = "tabulated"


def default_v_max(grid: SpaceGrid, T: float) -> float:
    """Velocity truncation 8 * radius / T."""
    return 8.0 * grid.radius / T


@dataclass(frozen=True, eq=False)
class LagrangianModel:
    """L(t, x, v) on [0, horizon] x grid hull x [-v_max, v_max].

    Quadratic kind: L = v**2/2 + potential(t, x), potential vectorized and
    nonnegative (``None`` means zero). Tabulated kind: ``table`` holds L on the
    product of ``table_x`` and ``table_v`` nodes (optionally with a leading
    ``table_t`` axis) and is linearly interpolated between nodes.
    """

    kind: str = QUADRATIC
    potential: Optional[Callable] = None
    v_max: float = 32.0
    horizon: float = 1.0
    delta: float = 2.0
    alpha: float = 0.5
    U: float = 0.0
    table: Optional[np.ndarray] = field(default=None, repr=False)
    table_x: Optional[np.ndarray] = field(default=None, repr=False)
    table_v: Optional[np.ndarray] = field(default=None, repr=False)
    table_t: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in (QUADRATIC, TABULATED):
            raise ValidationError(f"unknown Lagrangian kind {self.kind!r}")
        if not self.v_max > 0:
            raise ValidationError("v_max must be positive")
        if not self.horizon > 0:
            raise ValidationError("horizon must be positive")
        if not self.delta > 1 and self.kind == QUADRATIC:
            raise ValidationError("coercivity exponent must exceed 1")
        if self.alpha <= 0 or self.U < 0:
            raise ValidationError("need alpha > 0 and U >= 0")
        if self.kind == TABULATED:
            if self.table is None or self.table_x is None or self.table_v is None:
                raise ValidationError("tabulated kind needs table, table_x and table_v")
            tab = np.asarray(self.table, dtype=float)
            want = (len(self.table_x), len(self.table_v))
            if self.table_t is not None:
                want = (len(self.table_t),) + want
            if tab.shape != want:
                raise ValidationError(f"table shape {tab.shape} does not match axes {want}")
            if not np.all(np.isfinite(tab)):
                raise NonFiniteData("table must be finite")
            object.__setattr__(self, "table", tab)

    @property
    def is_quadratic(self) -> bool:
        return self.kind == QUADRATIC

    @property
    def has_potential(self) -> bool:
        return self.kind == QUADRATIC and self.potential is not None

    def ell(self, t, x):
        """Potential term broadcast over t and x (zero when absent)."""
        t = np.asarray(t, dtype=float)
        x = np.asarray(x, dtype=float)
        if self.potential is None:
            return np.zeros(np.broadcast(t, x).shape)
        return np.broadcast_to(np.asarray(self.potential(t, x), dtype=float), np.broadcast(t, x).shape)

    @classmethod
    def quadratic(cls, grid: SpaceGrid, T: float = 1.0, potential=None, v_max=None) -> "LagrangianModel":
        return cls(QUADRATIC, potential, default_v_max(grid, T) if v_max is None else v_max, T)

    @classmethod
    def tabulate(cls, func: Callable, x_nodes, v_nodes, T: float = 1.0, t_nodes=None,
                 delta: float = 2.0, alpha: float = 0.5, U: float = 0.0) -> "LagrangianModel":
        """Tabulate a vectorized func(t, x, v) on a product of nodes."""
        x_nodes = np.asarray(x_nodes, dtype=float)
        v_nodes = np.asarray(v_nodes, dtype=float)
        if t_nodes is None:
            tab = func(0.0, x_nodes[:, None], v_nodes[None, :])
        else:
            t_nodes = np.asarray(t_nodes, dtype=float)
            tab = func(t_nodes[:, None, None], x_nodes[None, :, None], v_nodes[None, None, :])
        tab = np.broadcast_to(tab, (len(x_nodes), len(v_nodes)) if t_nodes is None
                              else (len(t_nodes), len(x_nodes), len(v_nodes))).copy()
        return cls(TABULATED, None, float(np.max(np.abs(v_nodes))), T, delta, alpha, U,
                   tab, x_nodes, v_nodes, t_nodes)


def _interp_weights(nodes, q):
    """Left index and right weight for piecewise-linear interpolation, clamped."""
    q = np.clip(q, nodes[0], nodes[-1])
    i = np.clip(np.searchsorted(nodes, q, side="right") - 1, 0, len(nodes) - 2)
    w = (q - nodes[i]) / (nodes[i + 1] - nodes[i])
    return i, w


def eval_L(model: LagrangianModel, t, x, v):
    """Evaluate L; raises VelocityOutOfRange when |v| exceeds v_max."""
    t, x, v = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (t, x, v)))
    if np.any(np.abs(v) > model.v_max * (1 + 1e-12)):
        raise VelocityOutOfRange(f"|v| exceeds v_max = {model.v_max}")
    if np.any(t < -1e-12) or np.any(t > model.horizon * (1 + 1e-12)):
        raise ValidationError("t outside [0, T]")
    if model.kind == QUADRATIC:
        out = 0.5 * v * v + model.ell(t, x)
    else:
        ix, wx = _interp_weights(model.table_x, x)
        iv, wv = _interp_weights(model.table_v, v)
        if model.table_t is None:
            tab = model.table
            out = ((1 - wx) * ((1 - wv) * tab[ix, iv] + wv * tab[ix, iv + 1])
                   + wx * ((1 - wv) * tab[ix + 1, iv] + wv * tab[ix + 1, iv + 1]))
        else:
            it, wt = _interp_weights(model.table_t, t)
            out = 0.0
            for dt_, wt_ in ((0, 1 - wt), (1, wt)):
                tab = model.table
                out = out + wt_ * ((1 - wx) * ((1 - wv) * tab[it + dt_, ix, iv] + wv * tab[it + dt_, ix, iv + 1])
                                   + wx * ((1 - wv) * tab[it + dt_, ix + 1, iv] + wv * tab[it + dt_, ix + 1, iv + 1]))
    return out if np.ndim(out) else float(out)


@dataclass(frozen=True, eq=False)
class HamiltonianModel:
    """H(t, x, p) = sup_v {p v - L(t, x, v)}.

    ``closed_form`` is available for the quadratic kind; ``discrete_sup``
    maximizes over ``n_v`` equispaced velocities in [-v_max, v_max].
    """

    source: LagrangianModel
    mode: str = "closed_form"
    n_v: int = 4001

    def __post_init__(self):
        if self.mode not in ("closed_form", "discrete_sup"):
            raise ValidationError(f"unknown Hamiltonian mode {self.mode!r}")
        if self.mode == "closed_form" and not self.source.is_quadratic:
            raise ValidationError("closed form needs the quadratic kind")

    @property
    def v_grid(self) -> np.ndarray:
        return np.linspace(-self.source.v_max, self.source.v_max, self.n_v)

    @property
    def is_quadratic(self) -> bool:
        return self.mode == "closed_form"

    def _table(self, t, x, p):
        t, x, p = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (t, x, p)))
        v = self.v_grid
        L = eval_L(self.source, t[..., None], x[..., None], v)
        return p[..., None] * v - L, v


def eval_H(ham: HamiltonianModel, t, x, p):
    if ham.mode == "closed_form":
        p = np.asarray(p, dtype=float)
        out = 0.5 * p * p - ham.source.ell(t, x)
    else:
        vals, _ = ham._table(t, x, p)
        out = vals.max(axis=-1)
    return out if np.ndim(out) else float(out)


def grad_p_H(ham: HamiltonianModel, t, x, p):
    """Maximizing velocity; ties go to the smaller |v|, then the smaller index."""
    if ham.mode == "closed_form":
        out = np.broadcast_to(np.asarray(p, dtype=float),
                              np.broadcast(np.asarray(t), np.asarray(x), np.asarray(p)).shape).copy()
    else:
        vals, v = ham._table(t, x, p)
        best = vals.max(axis=-1, keepdims=True)
        tied = vals >= best - 1e-12 * np.maximum(1.0, np.abs(best))
        score = np.where(tied, np.abs(v), np.inf)
        out = v[np.argmin(score, axis=-1)]
    return out if np.ndim(out) else float(out)


# ---------------------------------------------------------------------------
# grid functions and Legendre transforms

@dataclass(frozen=True, eq=False)
class GridFunction:
    """Values on grid nodes; flagged nodes are outside the effective domain.

    Flagged nodes carry +inf or -inf in ``values``; the finite grid-truncated
    value, where one exists, is kept in ``truncated``.
    """

    grid: Optional[SpaceGrid]
    values: np.ndarray = field(repr=False)
    flags: Optional[np.ndarray] = field(default=None, repr=False)
    truncated: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        vals = np.array(self.values, dtype=float).ravel()
        if self.grid is not None and vals.shape[0] != self.grid.size:
            raise ValidationError("values do not match the grid")
        flags = np.zeros(vals.shape, bool) if self.flags is None else np.array(self.flags, bool).ravel()
        if np.any(~flags & ~np.isfinite(vals)):
            raise NonFiniteData("unflagged values must be finite")
        trunc = vals.copy() if self.truncated is None else np.array(self.truncated, dtype=float).ravel()
        for a in (vals, flags, trunc):
            a.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "flags", flags)
        object.__setattr__(self, "truncated", trunc)

    @property
    def nodes(self) -> np.ndarray:
        return self.grid.nodes

    @property
    def finite(self) -> bool:
        return not self.flags.any()

    @classmethod
    def from_callable(cls, grid: SpaceGrid, func: Callable) -> "GridFunction":
        return cls(grid, np.asarray(func(grid.nodes), dtype=float))

    def __add__(self, c):
        return GridFunction(self.grid, self.values + c, self.flags, self.truncated + c)


def _lower_hull(x, y):
    """Indices of the lower convex hull of points sorted by x."""
    hull = []
    for i in range(len(x)):
        while len(hull) >= 2:
            i1, i2 = hull[-2], hull[-1]
            if (y[i2] - y[i1]) * (x[i] - x[i1]) >= (y[i] - y[i1]) * (x[i2] - x[i1]):
                hull.pop()
            else:
                break
        hull.append(i)
    return np.array(hull, dtype=np.int64)


def _upper_hull(x, y):
    return _lower_hull(x, -y)


def convex_conjugate_points(x, y, v, slope_tol: float = 1e-12):
    """max_i (v x_i - y_i) for each v, via the lower hull and slope search.

    Returns (values, argmax indices into x, out-of-domain flags). A query is
    flagged when it lies outside the slope range of the hull, i.e. where the
    maximizer is pinned to a grid endpoint. Ties go to the smallest index.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    v = np.asarray(v, dtype=float)
    order = np.argsort(x, kind="stable")
    xs, ys = x[order], y[order]
    hull = _lower_hull(xs, ys)
    hx, hy = xs[hull], ys[hull]
    slopes = np.diff(hy) / np.diff(hx)
    k = np.searchsorted(slopes, v, side="left")
    vals = v * hx[k] - hy[k]
    idx = order[hull[k]]
    if slopes.size:
        scale = slope_tol * max(1.0, np.abs(slopes).max())
        flags = (v < slopes[0] - scale) | (v > slopes[-1] + scale)
    else:
        flags = np.ones(v.shape, bool)
    return vals, idx, flags


def _dual_points(dual_grid):
    if isinstance(dual_grid, SpaceGrid):
        return dual_grid, dual_grid.nodes
    pts = np.asarray(dual_grid, dtype=float).ravel()
    return None, pts


def legendre_convex(f: GridFunction, dual_grid) -> GridFunction:
    """f*(v) = sup_x {v x - f(x)} over the unflagged atoms of f.

    ``dual_grid`` may be a SpaceGrid or an array of dual points.
    """
    grid, v = _dual_points(dual_grid)
    ok = ~f.flags
    if f.grid is not None and f.grid.dimension != 1:
        raise ValidationError("Legendre transforms are one-dimensional")
    if not ok.any():
        return GridFunction(grid, np.full(v.shape, np.inf), np.ones(v.shape, bool), np.full(v.shape, np.inf))
    vals, _, flags = convex_conjugate_points(f.nodes[ok], f.values[ok], v)
    return GridFunction(grid, np.where(flags, np.inf, vals), flags, vals)


def legendre_concave(f: GridFunction, dual_grid) -> GridFunction:
    """f~(v) = inf_x {v x - f(x)}, computed as -(-f)*(-v)."""
    grid, v = _dual_points(dual_grid)
    neg = GridFunction(f.grid, -f.values, f.flags, -f.truncated)
    star = legendre_convex(neg, -v)
    return GridFunction(grid, -star.values, star.flags, -star.truncated)


def isotonic_increasing(y, w=None) -> np.ndarray:
    """Weighted least-squares projection of y onto nondecreasing sequences (pool adjacent violators)."""
    y = np.asarray(y, dtype=float)
    w = np.ones_like(y) if w is None else np.asarray(w, dtype=float)
    n = y.size
    val = np.empty(n)
    wt = np.empty(n)
    cnt = np.empty(n, dtype=np.int64)
    k = -1
    for i in range(n):
        k += 1
        val[k], wt[k], cnt[k] = y[i], w[i], 1
        while k > 0 and val[k - 1] > val[k]:
            tw = wt[k - 1] + wt[k]
            val[k - 1] = (wt[k - 1] * val[k - 1] + wt[k] * val[k]) / tw
            wt[k - 1] = tw
            cnt[k - 1] += cnt[k]
            k -= 1
    return np.repeat(val[:k + 1], cnt[:k + 1])


def concave_hull_values(x, y) -> np.ndarray:
    hull = _upper_hull(x, y)
    return np.interp(x, x[hull], y[hull])


def convex_hull_values(x, y) -> np.ndarray:
    hull = _lower_hull(x, y)
    return np.interp(x, x[hull], y[hull])


def concave_hull(f: GridFunction) -> GridFunction:
    """Smallest concave grid function dominating f."""
    if f.grid.dimension != 1:
        raise ValidationError("concave_hull is one-dimensional")
    return GridFunction(f.grid, concave_hull_values(f.nodes, f.values))


def convex_hull(f: GridFunction) -> GridFunction:
    """Largest convex grid function below f."""
    if f.grid.dimension != 1:
        raise ValidationError("convex_hull is one-dimensional")
    return GridFunction(f.grid, convex_hull_values(f.nodes, f.values))


# ---------------------------------------------------------------------------
# assumption checks

@dataclass
class SamplingConfig:
    x_min: float = -4.0
    x_max: float = 4.0
    n_t: int = 5
    n_x: int = 33
    n_v: int = 257
    eps_list: tuple = (1.0, 0.5, 0.25, 0.1, 0.05, 0.01)
    gradient_radius: Optional[float] = None
    fit_fraction: float = 0.5


@dataclass
class AssumptionReport:
    min_L: float
    a0_ok: bool
    delta: float
    alpha: float
    U: float
    lower_bound_margin: float
    a1_ok: bool
    declared_bound_ok: bool
    a2_modulus: dict
    a2_ok: bool
    a3_sup_L0: float
    a3_sup_grad_x_ratio: float
    a3_sup_grad_v: float
    a3_ok: bool
    a4_i: float
    a4_ok: bool
    violations: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.violations

    def lower_bound(self, v):
        """Convex minorant alpha (|v| - U)^delta on |v| >= U, zero inside."""
        return self.alpha * np.maximum(np.abs(v) - self.U, 0.0) ** self.delta


def _sample_L(model, t, x, v):
    return eval_L(model, t[:, None, None], x[None, :, None], v[None, None, :])


def check_assumptions(model: LagrangianModel, cfg: Optional[SamplingConfig] = None) -> AssumptionReport:
    """Sample the standing assumptions on L and fit the convex lower bound.

    Violations are listed in the report rather than raised.
    """
    cfg = cfg or SamplingConfig()
    T = model.horizon
    ts = np.linspace(0.0, T, cfg.n_t)
    xs = np.linspace(cfg.x_min, cfg.x_max, cfg.n_x)
    vs = np.linspace(-model.v_max, model.v_max, cfg.n_v)
    L = _sample_L(model, ts, xs, vs)
    violations = []

    min_L = float(L.min())
    a0_ok = bool(np.all(np.isfinite(L)) and min_L >= -1e-12)
    if not a0_ok:
        violations.append("A0: L takes negative values")

    # A1: m(u) = inf_{t,x} L(t,x,u), fit m(u) ~ alpha |u|^delta at large |u|
    m = L.min(axis=(0, 1))
    au = np.abs(vs)
    # fit the growth above m(0): an additive floor would bias a finite-range log-log slope
    growth = m - m[np.argmin(au)]
    top = (au >= cfg.fit_fraction * model.v_max) & (growth > 0)
    if top.sum() >= 2:
        delta = float(np.polyfit(np.log(au[top]), np.log(growth[top]), 1)[0])
    else:
        delta = 0.0
    a1_ok = delta > 1 + 1e-6
    alpha = U = 0.0
    margin = -np.inf
    if a1_ok:
        pos = au > 0
        ratio = np.full_like(m, np.inf)
        ratio[pos] = m[pos] / au[pos] ** delta
        alpha = float(ratio[top].min())
        # smallest threshold U beyond which m(u) >= alpha |u|^delta holds
        order = np.argsort(au, kind="stable")
        suffix_min = np.minimum.accumulate(ratio[order][::-1])[::-1]
        good = np.flatnonzero(suffix_min >= alpha * (1 - 1e-12))
        U = float(au[order][good[0]]) if good.size else float(model.v_max)
        lb = alpha * np.maximum(au - U, 0.0) ** delta
        margin = float((L - lb).min())
        if margin < -1e-9:
            a1_ok = False
    if not a1_ok:
        violations.append(f"A1: coercivity exponent {delta:.4g} is not above 1")

    # declared metadata: m(u) >= alpha |u|^delta for |u| >= U
    sel = au >= model.U
    declared_ok = bool(np.all(m[sel] >= model.alpha * au[sel] ** model.delta - 1e-9 * (1 + m[sel])))
    if not declared_ok:
        violations.append("A1: declared (alpha, delta, U) is not a lower bound on samples")

    # A2 modulus: sup (L(t,x,u) - L(s,y,u)) / (1 + L(t,x,u)) over |t-s|<=e, |x-y|<=e
    modulus = {}
    for eps in cfg.eps_list:
        worst = 0.0
        for fs in (-1.0, -0.5, 0.5, 1.0):
            for fx in (-1.0, -0.5, 0.0, 0.5, 1.0):
                t2 = np.clip(ts + fs * eps, 0.0, T)
                x2 = np.clip(xs + fx * eps, cfg.x_min, cfg.x_max)
                L2 = _sample_L(model, t2, x2, vs)
                worst = max(worst, float(((L - L2) / (1 + L)).max()))
        modulus[float(eps)] = worst
    mods = [modulus[e] for e in sorted(modulus, reverse=True)]
    a2_ok = bool(all(b <= a + 1e-12 for a, b in zip(mods, mods[1:])) and mods[-1] <= 0.05)
    if not a2_ok:
        violations.append("A2: sampled modulus does not decay to zero")

    # A3 boundedness samples
    iz = np.argmin(np.abs(vs))
    sup_L0 = float(L[:, :, iz].max())
    dx = xs[1] - xs[0]
    gx = np.abs(np.diff(L, axis=1)) / dx
    sup_gx = float((gx / (1 + 0.5 * (L[:, 1:] + L[:, :-1]))).max())
    R = cfg.gradient_radius if cfg.gradient_radius is not None else 0.25 * model.v_max
    inner = au <= R
    gv = np.abs(np.diff(L[:, :, inner], axis=2)) / (vs[1] - vs[0])
    sup_gv = float(gv.max()) if gv.size else 0.0
    a3_ok = bool(np.isfinite(sup_L0) and np.isfinite(sup_gx) and np.isfinite(sup_gv))
    if not a3_ok:
        violations.append("A3: unbounded samples")

    # A4(i): sup over t, x, y, u of (L(t,x,u) - L(t,y,u)) / (1 + L(t,x,u))
    lo = L.min(axis=1, keepdims=True)
    a4 = float(((L - lo) / (1 + L)).max())
    a4_ok = bool(np.isfinite(a4))
    if not a4_ok:
        violations.append("A4(i): infinite spatial oscillation")

    return AssumptionReport(min_L, a0_ok, delta, alpha, U, margin, a1_ok, declared_ok, modulus, a2_ok,
                            sup_L0, sup_gx, sup_gv, a3_ok, a4, a4_ok, violations)
