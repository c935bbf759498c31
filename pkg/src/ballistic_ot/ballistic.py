"""Minimizing and maximizing ballistic costs.

B_min(mu0, nuT) = inf E[<V, X(0)> + int L]    (V ~ mu0, X(T) ~ nuT)
B_max(nu0, muT) = sup E[<V, X(T)> - int L]    (X(0) ~ nu0, V ~ muT)

Each is computed by interpolation through an intermediate law nu,
    B_min = inf_nu W_min(mu0, nu) + C(nu, nuT),
    B_max = sup_nu W_max(nu, muT) - C(nu0, nu),
and by HJB duality over concave (resp. convex) terminal potentials.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Union

import numpy as np
from scipy.optimize import minimize, minimize_scalar
from scipy.special import logsumexp

from .dynamic_cost import (DualAscentConfig, HeatKernel, SinkhornConfig, c_dual_ascent, heat_kernel_log,
                           maximize, schrodinger_potentials)
from .errors import ValidationError
from .grid_measures import GridMeasure, binned_measure, dirac, make_measure
from .hjb_solver import (MINUS_H, PLUS_H, ValueField, extract_drift, plan_scheme, solve_with_plan,
                         terminal_law)
from .lagrangian import (GridFunction, HamiltonianModel, LagrangianModel, concave_hull_values,
                         convex_hull_values, isotonic_increasing, legendre_concave, legendre_convex)
from .sde_sim import ProcessSpec, estimate_ballistic_objective, make_process_spec, simulate
from .wasserstein import ANTIMONOTONE, COMONOTONE, quantile_coupling, w_max, w_min

log = logging.getLogger(__name__)

_FLOOR = 1e-14


@dataclass
class BallisticSolution:
    kind: str
    value: float
    method: str
    dual_measure: GridMeasure
    space_measure: GridMeasure
    interpolant: Optional[GridMeasure] = None
    dual_potential: Optional[GridFunction] = None
    value_field: Optional[ValueField] = None
    monotone_map: Optional[tuple] = None
    history: list = field(default_factory=list)
    details: dict = field(default_factory=dict)


@dataclass(frozen=True)
class InterpolationConfig:
    """Search over intermediate laws.

    ``search``: "blocks" (mirror descent over one block per atom of the dual
    measure), "translate" or "location_scale" (parametric families).
    ``c_method``: "oracle" (Sinkhorn, quadratic zero potential only), "dual"
    (HJB dual ascent) or "auto".
    """

    search: str = "blocks"
    c_method: str = "auto"
    max_iters: int = 300
    eta: float = 5.0
    tolerance: float = 2e-5
    patience: int = 20
    family_points: int = 81
    family_range: Optional[float] = None
    sinkhorn: SinkhornConfig = field(default_factory=SinkhornConfig)
    ascent: DualAscentConfig = field(default_factory=lambda: DualAscentConfig(max_iters=200))

    def __post_init__(self):
        if self.search not in ("blocks", "translate", "location_scale"):
            raise ValidationError(f"unknown search {self.search!r}")
        if self.c_method not in ("auto", "oracle", "dual"):
            raise ValidationError(f"unknown c_method {self.c_method!r}")


@dataclass(frozen=True)
class BallisticDualConfig:
    """Smoothed dual ascent: the hard min/max inside the Legendre transform is
    replaced by a soft one at temperature tau, annealed through ``taus``. The
    reported value always uses the exact transform.
    """

    ascent: DualAscentConfig = field(default_factory=lambda: DualAscentConfig(max_iters=150, patience=40))
    taus: tuple = (0.1, 0.03, 0.01)
    sign: str = PLUS_H
    init: str = "quantile"


def _as_dual_config(cfg) -> BallisticDualConfig:
    if cfg is None:
        return BallisticDualConfig()
    if isinstance(cfg, DualAscentConfig):
        return BallisticDualConfig(ascent=cfg)
    return cfg


def _hamiltonian(model: LagrangianModel) -> HamiltonianModel:
    return HamiltonianModel(model, "closed_form" if model.is_quadratic else "discrete_sup")


def _use_oracle(model: LagrangianModel, cfg: InterpolationConfig) -> bool:
    exact = model.is_quadratic and not model.has_potential
    if cfg.c_method == "oracle" and not exact:
        raise ValidationError("the Sinkhorn oracle needs the quadratic Lagrangian with zero potential")
    return exact if cfg.c_method == "auto" else cfg.c_method == "oracle"


def _check_pair(dual: GridMeasure, space: GridMeasure):
    if dual.grid.dimension != 1 or space.grid.dimension != 1:
        raise ValidationError("ballistic solvers are one-dimensional")


class _CostEvaluator:
    """C(nu0, nu1) with warm starts, by Sinkhorn or by HJB dual ascent."""

    def __init__(self, model, cfg: InterpolationConfig):
        self.model = model
        self.cfg = cfg
        self.oracle = _use_oracle(model, cfg)
        self.kernel = None
        self.warm = None
        self.calls = 0

    def __call__(self, nu0: GridMeasure, nu1: GridMeasure, want: Optional[str] = None):
        """Value and optionally the potential: 'first' -> dC/dnu0, 'second' -> dC/dnu1 (up to constants)."""
        self.calls += 1
        if self.oracle:
            if self.kernel is None:
                self.kernel = HeatKernel(nu0.grid, self.model.horizon)
            warm = self.warm if self.warm is not None and self.warm.shape == (nu1.support.size,) else None
            res = schrodinger_potentials(nu0, nu1, self.model.horizon, self.cfg.sinkhorn, warm, self.kernel)
            self.warm = res.b
            if want == "first":
                return res.value, -res.log_phi0
            if want == "second":
                lb = np.full(nu1.grid.size, np.nan)
                lb[nu1.support] = np.log(res.b)
                return res.value, lb
            return res.value, None
        cert = c_dual_ascent(nu0, nu1, self.model, self.cfg.ascent, f0=self.warm)
        self.warm = cert.argmax_f.values
        if want == "first":
            return cert.dual_value, -cert.value_field.initial
        if want == "second":
            return cert.dual_value, cert.argmax_f.values.copy()
        return cert.dual_value, None


# ---------------------------------------------------------------------------
# interpolation

def _block_search(dual: GridMeasure, fixed: GridMeasure, kind: str, model, cfg: InterpolationConfig):
    """Mirror descent over nu = sum_k m_k nu_k with one block per dual atom.

    The Wasserstein leg of a block decomposition is linear,
    sum_k m_k v_k <nu_k, x>, and bounds W from the correct side; its
    optimum over blocks equals W itself. Steps are entropic (multiplicative)
    with backtracking on the block objective.
    """
    grid = fixed.grid
    x = grid.nodes
    v, mw = dual.atoms()
    cost = _CostEvaluator(model, cfg)
    sgn = 1.0 if kind == "min" else -1.0     # minimize sgn * objective
    if kind == "min":
        start = fixed.weights
    else:
        # forward heat image of nu0
        lk = heat_kernel_log(grid, model.horizon)
        start = np.exp(logsumexp(lk + np.log(fixed.weights + 1e-300)[:, None], axis=0))
        start /= start.sum()

    def evaluate(blocks):
        w = mw @ blocks
        nu = make_measure(np.where(w > 1e-100, w, 0.0), grid)
        if kind == "min":
            C, g = cost(nu, fixed, "first")
            G = v[:, None] * x[None, :] + g[None, :]
            obj = float(mw @ (v * (blocks @ x))) + C
            val = w_min(dual, nu)[0] + C
        else:
            C, g = cost(fixed, nu, "second")
            g = np.where(np.isfinite(g), g, np.nanmax(g))
            G = -(v[:, None] * x[None, :] - g[None, :])
            obj = -(float(mw @ (v * (blocks @ x))) - C)
            val = w_max(nu, dual)[0] - C
        return obj, G, val, nu

    blocks = np.tile(np.maximum(start, 1e-300), (v.size, 1))
    blocks /= blocks.sum(1, keepdims=True)
    obj, G, val, nu = evaluate(blocks)
    best_val, best_nu = sgn * val, nu
    history = [sgn * best_val]
    eta = cfg.eta
    it = 0
    for it in range(1, cfg.max_iters + 1):
        centred = G - np.sum(blocks * G, axis=1, keepdims=True)
        for _ in range(30):
            step = -eta * centred
            step -= step.max(axis=1, keepdims=True)
            trial = blocks * np.exp(step)
            trial /= trial.sum(1, keepdims=True)
            t_obj, t_G, t_val, t_nu = evaluate(trial)
            if t_obj <= obj:
                break
            eta *= 0.5
        else:
            break
        blocks, obj, G = trial, t_obj, t_G
        eta = min(1.5 * eta, cfg.eta)
        if sgn * t_val < best_val:
            best_val, best_nu = sgn * t_val, t_nu
        history.append(sgn * best_val)
        w = cfg.patience
        if len(history) > w and abs(history[-1] - history[-1 - w]) <= cfg.tolerance * (1 + abs(history[-1])):
            break
    return sgn * best_val, best_nu, history, {"iterations": it, "c_calls": cost.calls,
                                              "c_method": "oracle" if cost.oracle else "dual"}


def _pushforward(base: GridMeasure, shift: float, scale: float) -> GridMeasure:
    m = base.mean
    return binned_measure(m + shift + scale * (base.grid.nodes - m), base.grid, base.weights)


def _family_search(dual: GridMeasure, fixed: GridMeasure, kind: str, model, cfg: InterpolationConfig):
    """Exhaustive scan plus local refinement over a location(-scale) family.

    Min: pushforwards of nuT squeezed to its heat preimage width.
    Max: pushforwards of the forward heat image of nu0.
    """
    grid = fixed.grid
    T = model.horizon
    cost = _CostEvaluator(model, cfg)
    if kind == "min":
        var = fixed.variance
        base = fixed
        s0 = float(np.sqrt(max(var - T, 4 * grid.h ** 2) / var))
    else:
        lk = heat_kernel_log(grid, T)
        w = np.exp(logsumexp(lk + np.log(fixed.weights + 1e-300)[:, None], axis=0))
        base = make_measure(w, grid)
        s0 = 1.0
    sgn = 1.0 if kind == "min" else -1.0

    def objective(c, s):
        nu = _pushforward(base, c, s)
        if kind == "min":
            return w_min(dual, nu)[0] + cost(nu, fixed)[0], nu
        return -(w_max(nu, dual)[0] - cost(fixed, nu)[0]), nu

    R = cfg.family_range if cfg.family_range is not None else 0.25 * (grid.x_max - grid.x_min)
    cs = np.linspace(-R, R, cfg.family_points)
    vals = [objective(c, s0)[0] for c in cs]
    j = int(np.argmin(vals))
    lo, hi = cs[max(j - 1, 0)], cs[min(j + 1, cs.size - 1)]
    res = minimize_scalar(lambda c: objective(c, s0)[0], bounds=(lo, hi), method="bounded",
                          options={"xatol": 1e-5})
    c_best, s_best, f_best = (res.x, s0, res.fun) if res.fun < vals[j] else (cs[j], s0, vals[j])
    if cfg.search == "location_scale":
        res2 = minimize(lambda p: objective(p[0], abs(p[1]))[0], x0=[c_best, s_best], method="Nelder-Mead",
                        options={"xatol": 1e-5, "fatol": 1e-9, "maxiter": 400})
        if res2.fun < f_best:
            c_best, s_best, f_best = res2.x[0], abs(res2.x[1]), res2.fun
    nu = objective(c_best, s_best)[1]
    return sgn * f_best, nu, list(sgn * np.minimum.accumulate(vals)), {
        "shift": float(c_best), "scale": float(s_best), "scan": (cs, sgn * np.array(vals)),
        "c_calls": cost.calls, "c_method": "oracle" if cost.oracle else "dual"}


def _interpolate(dual, fixed, kind, model, cfg):
    cfg = cfg or InterpolationConfig()
    _check_pair(dual, fixed)
    if cfg.search == "blocks":
        val, nu, hist, det = _block_search(dual, fixed, kind, model, cfg)
    else:
        val, nu, hist, det = _family_search(dual, fixed, kind, model, cfg)
    if kind == "min":
        cp = quantile_coupling(dual, nu, ANTIMONOTONE)
    else:
        cp = quantile_coupling(nu, dual, COMONOTONE)
    return BallisticSolution(kind, float(val), "interpolation", dual, fixed, interpolant=nu,
                             monotone_map=_coupling_map(cp, kind), history=hist, details=det)


def b_min_interpolate(mu0: GridMeasure, nuT: GridMeasure, model: LagrangianModel,
                      cfg: Optional[InterpolationConfig] = None) -> BallisticSolution:
    """inf over intermediate nu of W_min(mu0, nu) + C(nu, nuT); an upper bound by construction."""
    return _interpolate(mu0, nuT, "min", model, cfg)


def b_max_interpolate(nu0: GridMeasure, muT: GridMeasure, model: LagrangianModel,
                      cfg: Optional[InterpolationConfig] = None) -> BallisticSolution:
    """sup over intermediate nu of W_max(nu, muT) - C(nu0, nu); a lower bound by construction."""
    return _interpolate(muT, nu0, "max", model, cfg)


def _coupling_map(cp, kind):
    """Conditional mean map of a 1D coupling: (V atoms, mean X) for min, (X atoms, mean V) for max."""
    P = cp.plan
    if kind == "min":
        rows = cp.row_measure.support
        x = cp.col_measure.grid.nodes
        return cp.row_measure.grid.nodes[rows], (P[rows] @ x) / P[rows].sum(1)
    cols = cp.row_measure.support
    v = cp.col_measure.grid.nodes
    return cp.row_measure.grid.nodes[cols], (P[cols] @ v) / P[cols].sum(1)


# ---------------------------------------------------------------------------
# duality

class _SoftDual:
    """Smoothed dual objective for either problem, maximized over potentials.

    min: f concave, S(f) = int f dnuT + sum_k m_k softmin_x (v_k x - phi^f(0, x))
    max: g convex,  S(g) = -[sum_k m_k softmax_x (u_k x - g(x)) + int phi^g(0) dnu0]

    The search variable is the slope sequence of the potential, so the hull
    constraint (monotone slopes) and the Lipschitz cap are a Euclidean
    projection: isotonic regression followed by clipping. Values are
    recovered by integration and centered under the fixed measure, which
    leaves S unchanged.
    """

    def __init__(self, kind, dual, fixed, model, cfg: BallisticDualConfig, sign):
        self.kind, self.dual, self.fixed, self.cfg = kind, dual, fixed, cfg
        self.grid = fixed.grid
        self.x = self.grid.nodes
        self.h = self.grid.h
        self.v, self.mw = dual.atoms()
        self.ham = _hamiltonian(model)
        self.cap = model.v_max if cfg.ascent.lipschitz_cap is None else cfg.ascent.lipschitz_cap
        self.plan = plan_scheme(self.ham, self.grid, sign, cfg.ascent.scheme, f_lip=self.cap,
                                step_multiple=cfg.ascent.step_multiple)
        self.tau = cfg.taus[0]
        w = fixed.weights
        self.tail = np.cumsum(w[::-1])[::-1][1:]     # sum_{j > i} w_j

    def values(self, s):
        f = np.concatenate([[0.0], np.cumsum(s) * self.h])
        return f - np.dot(self.fixed.weights, f)

    def slopes(self, f):
        return np.diff(np.asarray(f, dtype=float)) / self.h

    def _to_slopes(self, d):
        # chain rule through integration and centering
        tail_d = np.cumsum(d[::-1])[::-1][1:]
        return self.h * (tail_d - d.sum() * self.tail)

    def field(self, f):
        return solve_with_plan(self.plan, GridFunction(self.grid, f))

    def gibbs(self, a):
        """Rows: softmin weights of a_k(x) at temperature tau; returns (soft values, mixture)."""
        z = -a / self.tau
        lse = logsumexp(z, axis=1, keepdims=True)
        p = np.exp(z - lse)
        return -self.tau * lse[:, 0], self.mw @ p

    def __call__(self, s):
        f = self.values(s)
        fld = self.field(f)
        phi0 = fld.initial
        if self.kind == "min":
            soft, mix = self.gibbs(self.v[:, None] * self.x[None, :] - phi0[None, :])
            val = float(self.fixed.weights @ f + self.mw @ soft)
            grad = self.fixed.weights - terminal_law(self.plan, fld, mix)
        else:
            soft, mix = self.gibbs(-(self.v[:, None] * self.x[None, :] - f[None, :]))
            val = float(self.mw @ soft - self.fixed.weights @ phi0)   # soft[k] = -softmax_k
            rho = terminal_law(self.plan, fld, self.fixed.weights)
            grad = mix - rho
        return val, self._to_slopes(grad), (fld, mix, grad)

    def hard(self, s, ext):
        fld = ext[0]
        if self.kind == "min":
            tr = legendre_concave(GridFunction(self.grid, fld.initial), self.v)
            return float(self.fixed.weights @ self.values(s) + self.mw @ tr.truncated)
        tr = legendre_convex(GridFunction(self.grid, self.values(s)), self.v)
        return -float(self.mw @ tr.truncated + self.fixed.weights @ fld.initial)

    def project(self, s):
        if self.kind == "min":
            s = -isotonic_increasing(-s)
        else:
            s = isotonic_increasing(s)
        return np.clip(s, -self.cap, self.cap)

    def direction(self, s, grad, ext):
        if self.cfg.ascent.direction == "gradient":
            return grad
        mix, g = ext[1], ext[2]
        if self.kind == "min":
            target, current = self.fixed.weights, self.fixed.weights - g
        else:
            target, current = mix, mix - g
        d = self.tau * (np.log(np.maximum(target, 0) + _FLOOR) - np.log(np.maximum(current, 0) + _FLOOR))
        return np.diff(d) / self.h


def _quantile_potential(kind, dual, fixed, model):
    """Starting potential whose gradient is the monotone quantile map onto the dual atoms.

    Max: nondecreasing map from the zero-drift terminal law of nu0 onto muT.
    Min: nonincreasing map from nuT onto mu0. Reduces to u x for a Dirac.
    """
    grid = fixed.grid
    x = grid.nodes
    if kind == "max":
        lk = heat_kernel_log(grid, model.horizon)
        w = np.exp(logsumexp(lk + np.log(fixed.weights + 1e-300)[:, None], axis=0))
        F = np.cumsum(w / w.sum())
    else:
        F = 1.0 - np.cumsum(fixed.weights)
    v, mw = dual.atoms()
    cdf = np.cumsum(mw)
    cdf[-1] = 1.0
    mid = np.clip(np.concatenate([[F[0]], 0.5 * (F[1:] + F[:-1])]), 0.0, 1.0)
    slope = v[np.minimum(np.searchsorted(cdf, mid, side="left"), v.size - 1)]
    pot = np.concatenate([[0.0], np.cumsum(slope[1:] * np.diff(x))])
    return pot


def _deconvolve(plan, fld, target: np.ndarray, start: np.ndarray, max_iters: int = 3000, tol: float = 1e-4):
    """Initial law whose forward flow under the value field's drift is ``target``.

    Richardson-Lucy iterations on the exact discrete forward map, started
    from ``start`` (multiplicative updates keep its support). Returns the law
    and the final l1 mismatch.
    """
    cols = np.flatnonzero(start > 1e-14 * start.max())
    n = target.size
    E = np.zeros((n, cols.size))
    E[cols, np.arange(cols.size)] = 1.0
    P = np.maximum(terminal_law(plan, fld, E), 0.0)
    norm = np.maximum(P.sum(0), 1e-300)
    w = start[cols] / start[cols].sum()
    err = np.inf
    for _ in range(max_iters):
        pw = P @ w
        err = float(np.abs(pw - target).sum())
        if err < tol:
            break
        w = w * (P.T @ np.where(pw > 0, target / np.maximum(pw, 1e-300), 0.0)) / norm
        w /= w.sum()
    out = np.zeros(n)
    out[cols] = w
    return out, err


def _dual_solve(kind, dual, fixed, model, cfg, sign, f0):
    cfg = _as_dual_config(cfg)
    _check_pair(dual, fixed)
    if dual.grid.dimension != 1:
        raise ValidationError("dual measures must be one-dimensional")
    obj = _SoftDual(kind, dual, fixed, model, cfg, sign)
    if f0 is not None:
        x = np.asarray(f0, dtype=float)
    elif cfg.init == "quantile":
        x = _quantile_potential(kind, dual, fixed, model)
    elif cfg.init == "mean_linear":
        x = dual.mean * fixed.grid.nodes
    else:
        x = np.zeros(fixed.grid.size)
    x = obj.slopes(x)
    best_val, best_x, best_ext, history, iters, status = -np.inf, None, None, [], 0, "max_iters"
    stages = []
    for tau in cfg.taus:
        obj.tau = tau
        res = maximize(obj, x, obj.project, obj.direction, cfg.ascent, report=obj.hard)
        iters += res.iterations
        stages.append({"tau": tau, "iterations": res.iterations, "status": res.status, "value": res.value})
        for hv in res.history:
            best_val_h = max(best_val, hv)
            history.append(best_val_h)
        if res.value > best_val:
            best_val, best_x, best_ext = res.value, res.x, res.extras
        status = res.status
        x = res.x
    obj.tau = cfg.taus[-1]
    _, _, (fld, mix, _) = obj(best_x)
    best_x = obj.values(best_x)
    interp = None
    if kind == "min":
        # the Gibbs mixture locates the contact set; deconvolution fixes the
        # law on it so that the drift carries it onto nuT
        law, err = _deconvolve(obj.plan, fld, fixed.weights, np.maximum(mix, 0.0))
        interp = make_measure(law, fixed.grid)
    value = best_val if kind == "min" else -best_val
    hist = history if kind == "min" else [-h for h in history]
    sol = BallisticSolution(kind, float(value), "dual", dual, fixed, interpolant=interp,
                            dual_potential=GridFunction(fixed.grid, best_x), value_field=fld, history=hist,
                            details={"stages": stages, "iterations": iters, "status": status, "sign": sign,
                                     "lipschitz_cap": obj.cap})
    if kind == "min":
        sol.details["gibbs_interpolant"] = make_measure(np.maximum(mix, 0.0), fixed.grid)
        sol.details["deconvolution_error"] = err
        sol.monotone_map = _coupling_map(quantile_coupling(dual, interp, ANTIMONOTONE), "min")
        sol.details["phi_bar_hull"] = concave_hull_values(fixed.grid.nodes, fld.initial)
    else:
        rho = terminal_law(obj.plan, fld, fixed.weights)
        law = make_measure(np.maximum(rho, 0.0), fixed.grid)
        sol.details["terminal_law"] = law
        sol.monotone_map = _coupling_map(quantile_coupling(law, dual, COMONOTONE), "max")
    return sol


def b_min_dual(mu0: GridMeasure, nuT: GridMeasure, model: LagrangianModel,
               cfg: Union[BallisticDualConfig, DualAscentConfig, None] = None,
               f0: Optional[np.ndarray] = None) -> BallisticSolution:
    """sup over concave Lipschitz f of int f dnuT + int (phi^f(0))~ dmu0; a lower bound.

    The interpolant returned is the law of X(0) paired with mu0: supported
    where the smoothed transform's Gibbs measure lives and deconvolved so that
    the optimal drift carries it onto nuT.
    """
    return _dual_solve("min", mu0, nuT, model, cfg, PLUS_H, f0)


def b_max_dual(nu0: GridMeasure, muT: GridMeasure, model: LagrangianModel,
               cfg: Union[BallisticDualConfig, DualAscentConfig, None] = None, sign: Optional[str] = None,
               g0: Optional[np.ndarray] = None) -> BallisticSolution:
    """inf over convex Lipschitz g of int g* dmuT + int phi^g(0) dnu0; an upper bound under plus_H."""
    cfg = _as_dual_config(cfg)
    return _dual_solve("max", muT, nu0, model, cfg, cfg.sign if sign is None else sign, g0)


def b_max_delta_closed_form(nu0: GridMeasure, u: float, model: LagrangianModel, sign: str = PLUS_H) -> float:
    """B_max(nu0, Dirac(u)) = int phi^f(0) dnu0 with f(x) = u x.

    Closed form u mean(nu0) + T u^2 / 2 for the quadratic Lagrangian with zero
    potential (plus_H); otherwise one HJB solve.
    """
    model_exact = model.is_quadratic and not model.has_potential
    if model_exact and sign == PLUS_H:
        return float(u * nu0.mean + 0.5 * model.horizon * u * u)
    ham = _hamiltonian(model)
    grid = nu0.grid
    f = GridFunction(grid, u * grid.nodes)
    plan = plan_scheme(ham, grid, sign, None, f_lip=abs(u))
    return float(nu0.weights @ solve_with_plan(plan, f).initial)


def adjudicate_sign(nu0: GridMeasure, us, model: LagrangianModel, n_paths: int = 20000, seed: int = 0,
                    tol: float = 5e-2) -> dict:
    """Decide the HJB sign convention on B_max(nu0, Dirac(u)) by Monte Carlo.

    For each sign, phi solves the HJB with terminal data u x and its value
    int phi(0) dnu0 is compared with the simulated <u, X(T)> - action of the
    feedback drift that convention prescribes. A convention is consistent when
    every u agrees within 3 s.e. + tol; ``selected`` is the unique consistent
    sign, or None. A policy whose ensemble is flagged (too many paths leave
    the grid) counts as disagreeing.
    """
    ham = _hamiltonian(model)
    grid = nu0.grid
    report = {}
    for sign in (PLUS_H, MINUS_H):
        rows = []
        for i, u in enumerate(us):
            u = float(u)
            f = GridFunction(grid, u * grid.nodes)
            plan = plan_scheme(ham, grid, sign, None, f_lip=abs(u))
            fld = solve_with_plan(plan, f)
            value = float(nu0.weights @ fld.initial)
            spec = make_process_spec(nu0, extract_drift(fld, ham), terminal_target=dirac(grid, u))
            ens = simulate(spec, n_paths, seed + i, record=True)
            if ens.flagged:
                # the policy leaves the grid: no usable estimate, so no agreement
                rows.append({"u": u, "hjb_value": value, "mc_value": None, "mc_se": None, "agrees": False,
                             "escape_fraction": ens.escape_fraction})
                continue
            est = estimate_ballistic_objective(ens, "max", model)
            rows.append({"u": u, "hjb_value": value, "mc_value": est.mean, "mc_se": est.std_error,
                         "agrees": bool(abs(value - est.mean) <= 3 * est.std_error + tol),
                         "escape_fraction": ens.escape_fraction})
        report[sign] = {"instances": rows, "consistent": all(r["agrees"] for r in rows)}
    ok = [sg for sg in (PLUS_H, MINUS_H) if report[sg]["consistent"]]
    report["selected"] = ok[0] if len(ok) == 1 else None
    return report


# ---------------------------------------------------------------------------
# process recovery

def _leg_value_field(sol: BallisticSolution, model: LagrangianModel) -> ValueField:
    """Value field driving the C leg of a solution: the one it carries, else
    one from dual ascent on (interpolant, nuT) for min or (nu0, interpolant) for max.
    """
    if sol.value_field is not None:
        return sol.value_field
    if sol.interpolant is None:
        raise ValidationError("solution carries no value field or interpolant")
    if sol.kind == "min":
        cert = c_dual_ascent(sol.interpolant, sol.space_measure, model)
    else:
        cert = c_dual_ascent(sol.space_measure, sol.interpolant, model)
    sol.value_field = cert.value_field
    sol.details["leg_dual_value"] = cert.dual_value
    return cert.value_field


def recover_min_process(sol: BallisticSolution, model: LagrangianModel, n_steps: Optional[int] = None) -> ProcessSpec:
    """Drift from the value field of the C leg; (V, X(0)) drawn from the
    antimonotone coupling of mu0 with the interpolant, the optimal pairing in 1D.
    """
    if sol.kind != "min":
        raise ValidationError("need a minimizing solution")
    if sol.interpolant is None:
        raise ValidationError("solution carries no interpolant")
    drift = extract_drift(_leg_value_field(sol, model), _hamiltonian(model))
    cp = quantile_coupling(sol.dual_measure, sol.interpolant, ANTIMONOTONE)
    return make_process_spec(sol.interpolant, drift, n_steps, initial_coupling=cp)


def recover_max_process(sol: BallisticSolution, model: LagrangianModel, n_steps: Optional[int] = None) -> ProcessSpec:
    """Drift from the value field of the C leg started at nu0; V assigned to
    X(T) through the comonotone (nondecreasing) quantile map onto muT.
    """
    if sol.kind != "max":
        raise ValidationError("need a maximizing solution")
    drift = extract_drift(_leg_value_field(sol, model), _hamiltonian(model))
    return make_process_spec(sol.space_measure, drift, n_steps, terminal_target=sol.dual_measure)
