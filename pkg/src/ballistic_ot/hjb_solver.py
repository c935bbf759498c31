"""Explicit monotone solver for phi_t + phi_xx/2 +/- H(t, x, phi_x) = 0 (1D).

The sweep runs backward from the terminal data. ``terminal_law`` runs the exact
transpose of the same sweep forward, which is the discrete Fokker-Planck flow
of the drift the field induces. This transpose also gives exact gradients of
linear functionals of phi(0, .) with respect to the terminal data.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _kernels as K
from .errors import CFLViolation, NonFiniteData, ValidationError
from .grid_measures import SpaceGrid, TimeGrid
from .lagrangian import (GridFunction, HamiltonianModel, LagrangianModel, convex_conjugate_points,
                         eval_H, eval_L, grad_p_H)

log = logging.getLogger(__name__)

PLUS_H = "plus_H"
MINUS_H = "minus_H"


def _sign_value(sign: str) -> float:
    if sign == PLUS_H:
        return 1.0
    if sign == MINUS_H:
        return -1.0
    raise ValidationError(f"sign must be {PLUS_H!r} or {MINUS_H!r}")


@dataclass(frozen=True)
class SchemeConfig:
    scheme: str = "lax_friedrichs"
    artificial_viscosity: float = 0.0
    cfl_safety: float = 0.9
    max_dt_override: Optional[float] = None
    n_p: int = 801

    def __post_init__(self):
        if self.scheme not in ("lax_friedrichs", "upwind"):
            raise ValidationError(f"unknown scheme {self.scheme!r}")
        if self.artificial_viscosity < 0:
            raise ValidationError("artificial_viscosity must be nonnegative")
        if not 0 < self.cfl_safety <= 1:
            raise ValidationError("cfl_safety must lie in (0, 1]")


@dataclass(frozen=True, eq=False)
class ValueField:
    time_grid: TimeGrid
    space_grid: SpaceGrid
    values: np.ndarray = field(repr=False)
    sign: str = PLUS_H
    theta: float = 0.0
    scheme: str = "lax_friedrichs"

    @property
    def initial(self) -> np.ndarray:
        return self.values[0]

    @property
    def terminal(self) -> np.ndarray:
        return self.values[-1]

    def at_time(self, t: float) -> np.ndarray:
        """Row at time t, linear in time between levels."""
        u = np.clip(t / self.time_grid.dt, 0, self.time_grid.n_steps)
        k = min(int(np.floor(u)), self.time_grid.n_steps - 1)
        w = u - k
        return (1 - w) * self.values[k] + w * self.values[k + 1]


@dataclass(frozen=True, eq=False)
class DriftField:
    time_grid: TimeGrid
    space_grid: SpaceGrid
    values: np.ndarray = field(repr=False)
    v_max: float = np.inf
    n_clipped: int = 0
    clip_warning: bool = False

    def subsample(self, stride: int) -> "DriftField":
        if self.time_grid.n_steps % stride:
            raise ValidationError("stride must divide the number of drift steps")
        tg = TimeGrid(self.time_grid.T, self.time_grid.n_steps // stride)
        return DriftField(tg, self.space_grid, self.values[::stride], self.v_max, self.n_clipped, self.clip_warning)


@dataclass(frozen=True, eq=False)
class _Plan:
    """Everything the compiled sweep needs besides the terminal data."""

    grid: SpaceGrid
    time_grid: TimeGrid
    sign: float
    theta: float
    mode: int
    quadratic: bool
    ell: Optional[np.ndarray] = None
    tab: Optional[np.ndarray] = None
    p0: float = 0.0
    dp: float = 1.0
    r0: Optional[np.ndarray] = None
    r1: Optional[np.ndarray] = None
    wr: Optional[np.ndarray] = None


def _lipschitz(values, h) -> float:
    return float(np.max(np.abs(np.diff(values)))) / h if values.size > 1 else 0.0


def _momentum_bound(ham: HamiltonianModel, grid: SpaceGrid, f_lip: float) -> float:
    """Bound on |phi_x| used to size dissipation and the momentum table."""
    model = ham.source
    T = model.horizon
    x = grid.nodes
    drift_x = 0.0
    if model.has_potential:
        ts = np.linspace(0.0, T, 9)
        ell = model.ell(ts[:, None], x[None, :])
        drift_x = float(np.max(np.abs(np.diff(ell, axis=1)))) / grid.h
    elif not model.is_quadratic:
        tab = model.table
        ax = tab.ndim - 2
        dx = np.diff(model.table_x)
        shape = [1] * tab.ndim
        shape[ax] = dx.size
        drift_x = float(np.max(np.abs(np.diff(tab, axis=ax)) / dx.reshape(shape)))
    return min(model.v_max, f_lip + T * drift_x) + 1.0


def _hamiltonian_table(ham: HamiltonianModel, grid: SpaceGrid, tg: TimeGrid, P: float, n_p: int):
    """H(t_r, x_i, p_j) on a momentum grid via exact discrete Legendre transforms."""
    model = ham.source
    p = np.linspace(-P, P, n_p)
    v = ham.v_grid
    x = grid.nodes
    if model.is_quadratic and not model.has_potential:
        t_rows = np.zeros(1)
    elif model.is_quadratic:
        t_rows = np.linspace(0.0, model.horizon, 17)
    else:
        t_rows = np.zeros(1) if model.table_t is None else np.asarray(model.table_t, float)
    tab = np.empty((t_rows.size, x.size, n_p))
    for r, t in enumerate(t_rows):
        L = eval_L(model, t, x[:, None], v[None, :])
        for i in range(x.size):
            tab[r, i] = convex_conjugate_points(v, L[i], p)[0]
    # map each step k (evaluated at t_{k+1}) to table rows
    t_eval = tg.times[1:]
    if t_rows.size == 1:
        r0 = np.zeros(tg.n_steps, np.int64)
        r1 = r0.copy()
        wr = np.zeros(tg.n_steps)
    else:
        r0 = np.clip(np.searchsorted(t_rows, t_eval, side="right") - 1, 0, t_rows.size - 2)
        wr = np.clip((t_eval - t_rows[r0]) / (t_rows[r0 + 1] - t_rows[r0]), 0.0, 1.0)
        r1 = r0 + 1
    return tab, float(p[0]), float(p[1] - p[0]), r0.astype(np.int64), r1.astype(np.int64), wr


def plan_scheme(ham: HamiltonianModel, grid: SpaceGrid, sign: str = PLUS_H,
                cfg: Optional[SchemeConfig] = None, time_grid: Optional[TimeGrid] = None,
                f_lip: Optional[float] = None, step_multiple: int = 1) -> _Plan:
    """Choose dissipation and time step, build coefficient tables.

    Dissipation theta is the smallest value keeping the central scheme
    monotone, max(artificial_viscosity, max|H_p| - 1/h, 0), and
    dt <= cfl_safety * h^2 / (1 + theta h).
    """
    cfg = cfg or SchemeConfig()
    if grid.dimension != 1:
        raise ValidationError("the HJB solver is one-dimensional")
    s = _sign_value(sign)
    model = ham.source
    h = grid.h
    P = _momentum_bound(ham, grid, model.v_max if f_lip is None else f_lip)
    upwind = cfg.scheme == "upwind"
    if upwind and not ham.is_quadratic:
        raise ValidationError("upwind scheme is offered for the quadratic closed form only")
    if ham.is_quadratic:
        hp_max = P
    else:
        hp_max = min(P, model.v_max)
    if upwind:
        theta = 0.0
        dt_max = cfg.cfl_safety * h * h / (1.0 + hp_max * h)
    else:
        theta = max(cfg.artificial_viscosity, hp_max - 1.0 / h, 0.0)
        dt_max = cfg.cfl_safety * h * h / (1.0 + theta * h)
    T = model.horizon
    if time_grid is None:
        dt_cap = dt_max
        if cfg.max_dt_override is not None:
            if cfg.max_dt_override > dt_max * (1 + 1e-12):
                raise CFLViolation(cfg.max_dt_override, dt_max)
            dt_cap = cfg.max_dt_override
        time_grid = TimeGrid.with_max_dt(T, dt_cap, step_multiple)
    else:
        if abs(time_grid.T - T) > 1e-12 * T:
            raise ValidationError("time grid horizon differs from the model horizon")
        if time_grid.dt > dt_max * (1 + 1e-12):
            raise CFLViolation(time_grid.dt, dt_max)
    mode = K.UPWIND if upwind else K.LF
    if ham.is_quadratic:
        if model.has_potential:
            ell = model.ell(time_grid.times[:, None], grid.nodes[None, :])
        else:
            ell = np.zeros((1, grid.size))
        return _Plan(grid, time_grid, s, theta, mode, True, ell=np.ascontiguousarray(ell, dtype=float))
    tab, p0, dp, r0, r1, wr = _hamiltonian_table(ham, grid, time_grid, P, cfg.n_p)
    return _Plan(grid, time_grid, s, theta, mode, False, tab=tab, p0=p0, dp=dp, r0=r0, r1=r1, wr=wr)


def _sweep(plan: _Plan, f: np.ndarray) -> np.ndarray:
    tg, h = plan.time_grid, plan.grid.h
    if plan.quadratic:
        return K.hjb_quad(f, tg.n_steps, tg.dt, h, plan.ell, plan.sign, plan.theta, plan.mode)
    return K.hjb_table(f, tg.n_steps, tg.dt, h, plan.tab, plan.p0, plan.dp, plan.r0, plan.r1, plan.wr,
                       plan.sign, plan.theta)


def _adjoint(plan: _Plan, phi: np.ndarray, w: np.ndarray) -> np.ndarray:
    tg, h = plan.time_grid, plan.grid.h
    w = np.ascontiguousarray(w, dtype=float)
    if plan.quadratic:
        return K.adjoint_quad(phi, w, tg.dt, h, plan.sign, plan.theta, plan.mode)
    return K.adjoint_table(phi, w, tg.dt, h, plan.tab, plan.p0, plan.dp, plan.r0, plan.r1, plan.wr,
                           plan.sign, plan.theta)


def _check_terminal(terminal: GridFunction) -> np.ndarray:
    if not terminal.finite or not np.all(np.isfinite(terminal.values)):
        raise NonFiniteData("terminal data must be finite")
    if terminal.grid.n_nodes < 4:
        raise ValidationError("need at least 4 nodes for the boundary extrapolation")
    return np.ascontiguousarray(terminal.values, dtype=float)


def solve_with_plan(plan: _Plan, terminal: GridFunction) -> ValueField:
    f = _check_terminal(terminal)
    phi = _sweep(plan, f)
    if not np.all(np.isfinite(phi)):
        raise NonFiniteData("solution blew up; check the stability settings")
    phi.setflags(write=False)
    scheme = "upwind" if plan.mode == K.UPWIND else "lax_friedrichs"
    return ValueField(plan.time_grid, plan.grid, phi, PLUS_H if plan.sign > 0 else MINUS_H, plan.theta, scheme)


def solve_hjb_backward(terminal: GridFunction, ham: HamiltonianModel, sign: str = PLUS_H,
                       cfg: Optional[SchemeConfig] = None, time_grid: Optional[TimeGrid] = None,
                       step_multiple: int = 1) -> ValueField:
    """Solve phi_t + phi_xx/2 + s H(t, x, phi_x) = 0 on [0, T], phi(T) = f.

    T is the model horizon. Without ``time_grid`` the largest stable step is
    used; an explicit ``time_grid`` that violates stability raises CFLViolation.
    """
    f = _check_terminal(terminal)
    plan = plan_scheme(ham, terminal.grid, sign, cfg, time_grid, _lipschitz(f, terminal.grid.h), step_multiple)
    return solve_with_plan(plan, terminal)


def terminal_law(plan: _Plan, field_: ValueField, initial_weights) -> np.ndarray:
    """Push initial weights through the transpose sweep up to time T.

    Equals the gradient of sum_i w_i phi(0, x_i) with respect to phi(T, .).
    A 2D array is treated as one weight vector per column.
    """
    w = np.asarray(initial_weights, dtype=float)
    if w.ndim == 1:
        return _adjoint(plan, field_.values, w)
    if plan.quadratic:
        tg = plan.time_grid
        return K.adjoint_quad_batch(field_.values, np.ascontiguousarray(w), tg.dt, plan.grid.h,
                                    plan.sign, plan.theta, plan.mode)
    return np.stack([_adjoint(plan, field_.values, w[:, j]) for j in range(w.shape[1])], axis=1)


def hopf_cole_solve(terminal: GridFunction, model: LagrangianModel, time_grid: TimeGrid,
                    pad_sd: float = 10.0) -> ValueField:
    """phi(t, x) = log sum_y G_{T-t}(x - y) exp(f(y)) / sum_y G_{T-t}(x - y).

    The terminal data are continued linearly past the grid (the same
    continuation the finite-difference solver imposes) over ``pad_sd``
    standard deviations, so the quadrature sees the whole kernel.
    """
    if not model.is_quadratic or model.has_potential:
        raise ValidationError("Hopf-Cole oracle needs the quadratic Lagrangian with zero potential")
    f = _check_terminal(terminal)
    grid = terminal.grid
    h = grid.h
    npad = int(np.ceil(pad_sd * np.sqrt(time_grid.T) / h))
    x = grid.nodes
    left = x[0] - h * np.arange(npad, 0, -1)
    right = x[-1] + h * np.arange(1, npad + 1)
    y = np.concatenate([left, x, right])
    sl, sr = (f[1] - f[0]) / h, (f[-1] - f[-2]) / h
    fy = np.concatenate([f[0] + sl * (left - x[0]), f, f[-1] + sr * (right - x[-1])])
    out = np.empty((time_grid.n_steps + 1, grid.size))
    for k, t in enumerate(time_grid.times):
        s = time_grid.T - t
        if s <= 1e-14 * time_grid.T:
            out[k] = f
            continue
        logk = -((x[:, None] - y[None, :]) ** 2) / (2.0 * s)
        a = logk + fy[None, :]
        am = a.max(axis=1, keepdims=True)
        km = logk.max(axis=1, keepdims=True)
        out[k] = (am[:, 0] + np.log(np.exp(a - am).sum(axis=1))
                  - km[:, 0] - np.log(np.exp(logk - km).sum(axis=1)))
    out[-1] = f
    out.setflags(write=False)
    return ValueField(time_grid, grid, out, PLUS_H)


def pde_residual(field_: ValueField, ham: HamiltonianModel) -> np.ndarray:
    """Central-difference residual at interior times and nodes, shape (N-1, n-2)."""
    phi = field_.values
    tg, grid = field_.time_grid, field_.space_grid
    h, dt = grid.h, tg.dt
    s = _sign_value(field_.sign)
    dphi_t = (phi[2:, 1:-1] - phi[:-2, 1:-1]) / (2 * dt)
    mid = phi[1:-1]
    d2 = (mid[:, 2:] - 2 * mid[:, 1:-1] + mid[:, :-2]) / (h * h)
    p = (mid[:, 2:] - mid[:, :-2]) / (2 * h)
    t = tg.times[1:-1, None]
    x = grid.nodes[None, 1:-1]
    if ham.is_quadratic:
        H = eval_H(ham, t, x, p)
    else:
        H = np.array([eval_H(ham, t[k], x[0], p[k]) for k in range(p.shape[0])])
    return dphi_t + 0.5 * d2 + s * H


def extract_drift(field_: ValueField, ham: HamiltonianModel, v_max: Optional[float] = None,
                  warn_fraction: float = 0.01) -> DriftField:
    """Optimal feedback velocity from the gradient of a value field.

    For a plus_H field (supremum of E[f - int L]) the drift is grad_p H(phi_x).
    A minus_H field is the infimum of E[g + int L], whose minimizing velocity
    is grad_p H(-phi_x). Values are clipped to v_max.
    """
    v_max = ham.source.v_max if v_max is None else v_max
    grid, tg = field_.space_grid, field_.time_grid
    p = np.gradient(field_.values, grid.h, axis=1, edge_order=1)
    if field_.sign == MINUS_H:
        p = -p
    t = tg.times[:, None]
    x = grid.nodes[None, :]
    if ham.is_quadratic:
        beta = np.asarray(grad_p_H(ham, t, x, p), dtype=float)
    else:
        beta = np.array([grad_p_H(ham, t[k], x[0], p[k]) for k in range(p.shape[0])])
    over = np.abs(beta) > v_max
    n_clip = int(over.sum())
    beta = np.clip(beta, -v_max, v_max)
    warn = n_clip > warn_fraction * beta.size
    if warn:
        log.warning("drift clipped at %d of %d nodes", n_clip, beta.size)
    return DriftField(tg, grid, beta, v_max, n_clip, bool(warn))
