"""Stochastic transport cost C(nu0, nuT): dual ascent, Monte Carlo, Sinkhorn oracle.

C(nu0, nuT) = inf E int L(t, X, beta) dt over unit-noise diffusions with the
given marginals. Its dual is sup_f int f dnuT - int phi^f(0, .) dnu0 where phi^f
solves the plus-H HJB equation with terminal data f.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy.special import logsumexp

from .errors import KernelUnderflow, SolverFailure, ValidationError
from .grid_measures import GridMeasure, make_measure, w1_metric
from .hjb_solver import (PLUS_H, DriftField, SchemeConfig, ValueField, extract_drift, plan_scheme,
                         solve_with_plan, terminal_law)
from .lagrangian import GridFunction, HamiltonianModel, LagrangianModel
from .sde_sim import empirical_terminal_law, estimate_action, make_process_spec, simulate

log = logging.getLogger(__name__)

_FLOOR = 1e-14


@dataclass(frozen=True)
class DualAscentConfig:
    """Projected ascent settings shared by every dual solver.

    ``direction`` "log_ratio" preconditions the mass-mismatch gradient by the
    log ratio of target and current laws; "gradient" uses it raw.
    """

    max_iters: int = 500
    step_rule: str = "backtracking"
    step_size: float = 1.0
    gradient_mode: str = "envelope"
    tolerance: float = 1e-7
    f_bound: float = 50.0
    lipschitz_cap: Optional[float] = None
    direction: str = "log_ratio"
    patience: int = 50
    window: int = 25
    scheme: SchemeConfig = field(default_factory=SchemeConfig)
    step_multiple: int = 1

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValidationError("tolerance must be positive")
        if not np.isfinite(self.f_bound) or self.f_bound <= 0:
            raise ValidationError("f_bound must be finite and positive")
        if self.step_rule not in ("fixed", "backtracking"):
            raise ValidationError(f"unknown step rule {self.step_rule!r}")
        if self.gradient_mode not in ("envelope", "finite_difference"):
            raise ValidationError(f"unknown gradient mode {self.gradient_mode!r}")
        if self.direction not in ("log_ratio", "gradient"):
            raise ValidationError(f"unknown direction {self.direction!r}")
        if self.max_iters < 0 or self.step_size <= 0:
            raise ValidationError("need max_iters >= 0 and step_size > 0")


@dataclass
class AscentResult:
    x: np.ndarray
    value: float
    extras: object
    history: list
    iterations: int
    status: str


def maximize(evaluate: Callable, x0: np.ndarray, project: Callable, direction: Callable,
             cfg: DualAscentConfig, report: Optional[Callable] = None) -> AscentResult:
    """Projected ascent with Armijo backtracking along the projection arc.

    ``evaluate(x) -> (search value, gradient, extras)``; ``report(x, extras)``
    gives the certified value tracked for the best iterate (defaults to the
    search value). The best reported value is nondecreasing in ``history``.
    """
    x = project(np.asarray(x0, dtype=float))
    val, grad, ext = evaluate(x)
    rep = report(x, ext) if report else val
    best = AscentResult(x, rep, ext, [rep], 0, "max_iters")
    step = cfg.step_size
    stale = 0
    it = 0
    for it in range(1, cfg.max_iters + 1):
        d = direction(x, grad, ext)
        if cfg.step_rule == "fixed":
            xn = project(x + cfg.step_size * d)
            vn, gn, en = evaluate(xn)
        else:
            found = False
            # preconditioned direction first, then the plain projected gradient
            for dd in (d, grad * (np.max(np.abs(d)) / max(np.max(np.abs(grad)), 1e-300))):
                trial = min(cfg.step_size, 2.0 * step)
                for _ in range(40):
                    xn = project(x + trial * dd)
                    vn, gn, en = evaluate(xn)
                    if vn >= val + 1e-4 * float(np.dot(grad, xn - x)) and np.isfinite(vn):
                        found = True
                        break
                    trial *= 0.5
                if found:
                    break
            if not found:
                best.status = "converged"
                break
            step = trial
        moved = float(np.max(np.abs(xn - x)))
        x, val, grad, ext = xn, vn, gn, en
        rep = report(x, ext) if report else val
        if rep > best.value:
            gain = rep - best.value
            best.x, best.value, best.extras = x, rep, ext
            stale = 0 if gain > cfg.tolerance * (1 + abs(rep)) else stale + 1
        else:
            stale += 1
        best.history.append(best.value)
        h = best.history
        if stale >= cfg.patience or moved < 1e-13:
            best.status = "converged"
            break
        if len(h) > cfg.window and h[-1] - h[-1 - cfg.window] <= cfg.tolerance * (1 + abs(h[-1])):
            best.status = "converged"
            break
    best.iterations = it
    return best


def lipschitz_project(f: np.ndarray, h: float, cap: float, bound: float, anchor: int) -> np.ndarray:
    """Retract onto |f_{i+1} - f_i| <= cap h and |f| <= bound, keeping f[anchor]."""
    d = np.clip(np.diff(f), -cap * h, cap * h)
    g = np.concatenate([[0.0], np.cumsum(d)])
    g += f[anchor] - g[anchor]
    return np.clip(g, -bound, bound)


def log_ratio_direction(target: np.ndarray, grad: np.ndarray, sign: float = 1.0) -> np.ndarray:
    """log(target / current) where current = target - sign * grad, centered under target."""
    current = np.maximum(target - sign * grad, 0.0)
    d = np.log(target + _FLOOR) - np.log(current + _FLOOR)
    return d - np.dot(target, d)


# ---------------------------------------------------------------------------
# Sinkhorn oracle

@dataclass(frozen=True)
class SinkhornConfig:
    tol: float = 1e-10
    max_iter: int = 200000
    log_domain: str = "auto"


@dataclass(frozen=True, eq=False)
class SinkhornResult:
    value: float
    log_phi0: np.ndarray   # log sum_y K(x, y) b(y) at every grid node
    b: np.ndarray          # column scaling on nuT's support
    iterations: int
    marginal_error: float


def heat_kernel_log(grid, T: float) -> np.ndarray:
    """log K(x, y) of the lattice Gaussian kernel with variance T, killed at the grid edge.

    Normalized by its mass on the infinite lattice, so interior rows sum to 1
    and rows near the boundary lose the mass that would leave the grid.
    """
    x = grid.nodes
    h = grid.h
    J = int(np.ceil(max(grid.size, 40.0 * np.sqrt(T) / h)))
    j = np.arange(-J, J + 1) * h
    log_z = logsumexp(-j * j / (2.0 * T))
    return -((x[:, None] - x[None, :]) ** 2) / (2.0 * T) - log_z


class HeatKernel:
    """Killed lattice heat kernel in log and (where representable) linear form."""

    def __init__(self, grid, T: float):
        self.grid, self.T = grid, T
        self.log = heat_kernel_log(grid, T)
        self.lin = np.exp(self.log) if self.log.min() > -700 else None


def schrodinger_potentials(nu0: GridMeasure, nuT: GridMeasure, T: float,
                           cfg: Optional[SinkhornConfig] = None, b0: Optional[np.ndarray] = None,
                           kernel: Optional[HeatKernel] = None) -> SinkhornResult:
    """Solve min KL(pi | nu0 (x) K) over couplings of (nu0, nuT) by Sinkhorn scaling.

    value = sum nuT log b - sum nu0 log(K b). Runs in the linear domain when the
    kernel is representable there and falls back to log-domain updates.
    """
    cfg = cfg or SinkhornConfig()
    if nu0.grid != nuT.grid:
        raise ValidationError("marginals must share a grid")
    if nu0.grid.dimension != 1:
        raise ValidationError("oracle is one-dimensional")
    if not T > 0:
        raise ValidationError("T must be positive")
    kernel = HeatKernel(nu0.grid, T) if kernel is None else kernel
    logK = kernel.log
    s0, sT = nu0.support, nuT.support
    full0, fullT = s0.size == nu0.grid.size, sT.size == nuT.grid.size
    a_w, b_w = nu0.weights[s0], nuT.weights[sT]
    lk = logK if full0 and fullT else logK[np.ix_(s0, sT)]
    if lk.max(axis=1).min() < -700 or lk.max(axis=0).min() < -700:
        raise KernelUnderflow(f"supports too far apart for variance {T}: kernel below exp(-700)")
    use_log = cfg.log_domain == "always" or (cfg.log_domain == "auto" and lk.min() < -700)
    warm = b0 is not None and b0.shape == (sT.size,) and np.all(np.isfinite(b0)) and np.all(b0 > 0)
    err = np.inf
    if not use_log:
        if kernel.lin is not None and full0 and fullT:
            Kr = kernel.lin
        else:
            Kr = np.exp(lk)
        b = b0.copy() if warm else np.ones(sT.size)
        for it in range(1, cfg.max_iter + 1):
            a = a_w / (Kr @ b)
            b = b_w / (Kr.T @ a)
            if not np.all(np.isfinite(b)) or b.max() > 1e250 or b.min() < 1e-250:
                use_log = True
                break
            if it % 5 == 0 or it == 1:
                err = float(np.abs(a * (Kr @ b) - a_w).sum())
                if err < cfg.tol:
                    break
        if not use_log:
            lb = np.log(b)
            KT = kernel.lin[:, sT] if kernel.lin is not None else None
            log_phi0 = np.log(KT @ b) if KT is not None else logsumexp(logK[:, sT] + lb[None, :], axis=1)
    if use_log:
        lb = np.log(b0) if warm else np.zeros(sT.size)
        for it in range(1, cfg.max_iter + 1):
            la = np.log(a_w) - logsumexp(lk + lb[None, :], axis=1)
            lb = np.log(b_w) - logsumexp(lk + la[:, None], axis=0)
            if it % 5 == 0 or it == 1:
                err = float(np.abs(np.exp(la + logsumexp(lk + lb[None, :], axis=1)) - a_w).sum())
                if err < cfg.tol:
                    break
        log_phi0 = logsumexp(logK[:, sT] + lb[None, :], axis=1)
    if err >= cfg.tol:
        raise SolverFailure(f"Sinkhorn did not reach tolerance {cfg.tol:g} (error {err:.2e})")
    value = float(np.dot(b_w, lb) - np.dot(a_w, log_phi0[s0]))
    return SinkhornResult(value, log_phi0, np.exp(lb), it, err)


def schrodinger_oracle(nu0: GridMeasure, nuT: GridMeasure, T: float,
                       cfg: Optional[SinkhornConfig] = None) -> float:
    """Static Schrodinger value against the heat kernel of variance T.

    For L = |v|^2/2 with unit noise this equals the dynamic cost.
    """
    return schrodinger_potentials(nu0, nuT, T, cfg).value


def jensen_lower_bound(nu0: GridMeasure, nuT: GridMeasure, model: LagrangianModel) -> float:
    """alpha T (|dmean| / T)^delta - alpha T U^delta, floored at zero."""
    T = model.horizon
    dm = float(np.linalg.norm(np.atleast_1d(nuT.mean) - np.atleast_1d(nu0.mean)))
    val = model.alpha * T * (dm / T) ** model.delta - model.alpha * T * model.U ** model.delta
    return max(val, 0.0)


# ---------------------------------------------------------------------------
# dual ascent

@dataclass
class CostCertificate:
    dual_value: float
    argmax_f: GridFunction
    value_field: ValueField
    iterations: int
    status: str
    history: list
    primal_value: Optional[float] = None
    primal_se: Optional[float] = None
    oracle_value: Optional[float] = None
    jensen_value: Optional[float] = None
    terminal_w1: Optional[float] = None

    @property
    def gap(self) -> Optional[float]:
        ref = self.oracle_value if self.oracle_value is not None else self.primal_value
        return None if ref is None else ref - self.dual_value


class _CostDual:
    """J(f) = int f dnuT - int phi^f(0) dnu0 with its exact discrete gradient."""

    def __init__(self, nu0, nuT, model, cfg, hamiltonian=None):
        self.nu0, self.nuT, self.cfg = nu0, nuT, cfg
        self.ham = hamiltonian or HamiltonianModel(model, "closed_form" if model.is_quadratic else "discrete_sup")
        self.cap = model.v_max if cfg.lipschitz_cap is None else cfg.lipschitz_cap
        self.plan = plan_scheme(self.ham, nu0.grid, PLUS_H, cfg.scheme, f_lip=self.cap,
                                step_multiple=cfg.step_multiple)
        if self.plan.theta * nu0.grid.h > 0.1:
            # LF dissipation acts like extra Brownian variance and biases the dual upward
            log.warning("scheme dissipation adds %.0f%% to the diffusion; refine the grid or lower lipschitz_cap",
                        100 * self.plan.theta * nu0.grid.h)
        self.grid = nu0.grid
        self.anchor = int(np.searchsorted(np.cumsum(nuT.weights), 0.5))

    def field(self, f):
        return solve_with_plan(self.plan, GridFunction(self.grid, f))

    def value(self, f):
        fld = self.field(f)
        return float(self.nuT.weights @ f - self.nu0.weights @ fld.initial), fld

    def __call__(self, f):
        val, fld = self.value(f)
        if self.cfg.gradient_mode == "envelope":
            grad = self.nuT.weights - terminal_law(self.plan, fld, self.nu0.weights)
        else:
            grad = self.fd_gradient(f)
        return val, grad, fld

    def fd_gradient(self, f, eps=1e-6):
        g = np.empty_like(f)
        for i in range(f.size):
            e = np.zeros_like(f)
            e[i] = eps
            g[i] = (self.value(f + e)[0] - self.value(f - e)[0]) / (2 * eps)
        return g

    def project(self, f):
        f = f - np.dot(self.nuT.weights, f)
        return lipschitz_project(f, self.grid.h, self.cap, self.cfg.f_bound, self.anchor)

    def direction(self, f, grad, fld):
        if self.cfg.direction == "gradient":
            return grad
        return log_ratio_direction(self.nuT.weights, grad)


def c_dual_ascent(nu0: GridMeasure, nuT: GridMeasure, model: LagrangianModel,
                  cfg: Optional[DualAscentConfig] = None, f0: Optional[np.ndarray] = None) -> CostCertificate:
    """Maximize the HJB dual of C over Lipschitz grid potentials f."""
    cfg = cfg or DualAscentConfig()
    if nu0.grid != nuT.grid:
        raise ValidationError("marginals must share a grid")
    obj = _CostDual(nu0, nuT, model, cfg)
    x0 = np.zeros(nu0.grid.size) if f0 is None else np.asarray(f0, dtype=float)
    res = maximize(obj, x0, obj.project, obj.direction, cfg)
    cert = CostCertificate(res.value, GridFunction(nu0.grid, res.x), res.extras, res.iterations, res.status,
                           res.history)
    cert.jensen_value = jensen_lower_bound(nu0, nuT, model)
    log.info("C dual %.6f after %d iterations (%s)", res.value, res.iterations, res.status)
    return cert


def c_primal_mc(nu0: GridMeasure, drift: DriftField, model: LagrangianModel, n_paths: int, seed: int,
                n_steps: Optional[int] = None):
    """Monte Carlo action of a drift started from nu0: (mean, std error, terminal law)."""
    spec = make_process_spec(nu0, drift, n_steps)
    ens = simulate(spec, n_paths, seed)
    est = estimate_action(ens, model)
    return est.mean, est.std_error, empirical_terminal_law(ens)


def cost_certificate(nu0: GridMeasure, nuT: GridMeasure, model: LagrangianModel,
                     cfg: Optional[DualAscentConfig] = None, n_paths: int = 0, seed: int = 0,
                     with_oracle: bool = True, sinkhorn: Optional[SinkhornConfig] = None) -> CostCertificate:
    """Dual ascent plus, where available, oracle and Monte Carlo primal sides."""
    cert = c_dual_ascent(nu0, nuT, model, cfg)
    if with_oracle and model.is_quadratic and not model.has_potential:
        cert.oracle_value = schrodinger_oracle(nu0, nuT, model.horizon, sinkhorn)
    if n_paths > 0:
        ham = HamiltonianModel(model, "closed_form" if model.is_quadratic else "discrete_sup")
        drift = extract_drift(cert.value_field, ham)
        cert.primal_value, cert.primal_se, law = c_primal_mc(nu0, drift, model, n_paths, seed)
        cert.terminal_w1 = w1_metric(law, nuT)
    return cert
