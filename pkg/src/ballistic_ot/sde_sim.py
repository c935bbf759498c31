"""Euler-Maruyama simulation of unit-noise controlled diffusions and estimators."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _kernels as K
from .errors import FlaggedEnsemble, GridMismatch, ValidationError
from .grid_measures import GridMeasure, SpaceGrid, TimeGrid, binned_measure
from .hjb_solver import DriftField
from .lagrangian import LagrangianModel, eval_L
from .wasserstein import Coupling

log = logging.getLogger(__name__)

BLOCK = 8192          # paths per random stream; part of the reproducibility contract
ESCAPE_LIMIT = 0.01


@dataclass(frozen=True, eq=False)
class ProcessSpec:
    """Drift, initial law and endpoint pairing rule of a controlled diffusion.

    ``initial_coupling`` (rows V ~ mu_0, columns X(0)) pairs V with the start for
    the minimizing problem; ``terminal_target`` pairs V with X(T)
    comonotonically for the maximizing problem.
    """

    initial_law: GridMeasure
    drift: DriftField
    time_grid: TimeGrid
    initial_coupling: Optional[Coupling] = None
    terminal_target: Optional[GridMeasure] = None

    def __post_init__(self):
        if abs(self.time_grid.T - self.drift.time_grid.T) > 1e-12 * self.time_grid.T:
            raise GridMismatch("simulation and drift horizons differ")
        if self.drift.space_grid != self.initial_law.grid:
            raise GridMismatch("drift and initial law live on different grids")
        if self.initial_coupling is not None:
            if self.initial_coupling.col_measure.grid != self.initial_law.grid or np.abs(
                    self.initial_coupling.plan.sum(0) - self.initial_law.weights).max() > 1e-10:
                raise ValidationError("coupling column marginal must be the initial law")
        if self.initial_coupling is not None and self.terminal_target is not None:
            raise ValidationError("use either an initial coupling or a terminal target")


def resolution_steps(drift: DriftField, min_steps: int = 64) -> int:
    """Smallest step count with dt <= h / max|drift| (and at least ``min_steps``)."""
    bmax = float(np.abs(drift.values).max())
    T = drift.time_grid.T
    n = min_steps if bmax == 0 else int(np.ceil(T * bmax / drift.space_grid.h - 1e-12))
    return max(n, min_steps)


def make_process_spec(initial_law: GridMeasure, drift: DriftField, n_steps: Optional[int] = None,
                      initial_coupling: Optional[Coupling] = None,
                      terminal_target: Optional[GridMeasure] = None) -> ProcessSpec:
    n = resolution_steps(drift) if n_steps is None else n_steps
    return ProcessSpec(initial_law, drift, TimeGrid(drift.time_grid.T, n), initial_coupling, terminal_target)


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    n_paths: int
    positions: Optional[np.ndarray] = field(repr=False)
    endpoints: np.ndarray = field(repr=False)
    v_samples: Optional[np.ndarray] = field(repr=False)
    seed: int
    escape_fraction: float
    spec: ProcessSpec = field(repr=False)
    noise_scale: float = 1.0

    @property
    def flagged(self) -> bool:
        return self.escape_fraction > ESCAPE_LIMIT

    @property
    def x0(self) -> np.ndarray:
        return self.endpoints[:, 0]

    @property
    def xT(self) -> np.ndarray:
        return self.endpoints[:, 1]


@dataclass(frozen=True)
class ActionEstimate:
    mean: float
    std_error: float
    n_paths: int


def _estimate(samples) -> ActionEstimate:
    n = samples.size
    se = float(np.std(samples, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return ActionEstimate(float(np.sum(samples) / n), se, int(n))


def _stream(seed: int, block: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(block)])))


def comonotone_assign(x, target: GridMeasure) -> np.ndarray:
    """V_i = target quantile at the mid-rank of x_i (ties broken by path index)."""
    n = x.size
    order = np.argsort(x, kind="stable")
    q = (np.arange(n) + 0.5) / n
    cdf = np.cumsum(target.weights)
    cdf[-1] = 1.0
    idx = np.minimum(np.searchsorted(cdf, q, side="left"), target.grid.size - 1)
    v = np.empty(n)
    v[order] = target.grid.nodes[idx]
    return v


def simulate(spec: ProcessSpec, n_paths: int, seed: int, record: bool = True,
             noise_scale: float = 1.0, check_resolution: bool = True) -> PathEnsemble:
    """X_{k+1} = X_k + beta(t_k, X_k) dt + sqrt(dt) xi_k, clamped to the grid hull.

    Paths are generated in fixed blocks of BLOCK paths, block b drawing from a
    Philox stream keyed by (seed, b), so results do not depend on scheduling.
    """
    if int(n_paths) != n_paths or n_paths < 1:
        raise ValidationError("n_paths must be a positive integer")
    grid = spec.drift.space_grid
    tg = spec.time_grid
    if check_resolution:
        bmax = float(np.abs(spec.drift.values).max())
        if bmax > 0 and tg.dt > grid.h / bmax * (1 + 1e-9):
            raise ValidationError(f"dt {tg.dt:.3e} exceeds path resolution h/max|drift| = {grid.h / bmax:.3e}")
    drift = np.ascontiguousarray(spec.drift.values, dtype=float)
    drift_dt = spec.drift.time_grid.dt
    nodes = grid.nodes
    cp = spec.initial_coupling
    if cp is not None:
        pairs = np.flatnonzero(cp.plan.ravel() > 0)
        probs = cp.plan.ravel()[pairs]
        probs = probs / probs.sum()
        ncol = cp.plan.shape[1]
        vnodes = cp.row_measure.grid.nodes
    else:
        sup = spec.initial_law.support
        probs = spec.initial_law.weights[sup]
        probs = probs / probs.sum()
    pos_blocks, end_blocks, v_blocks, esc = [], [], [], 0
    for b, start in enumerate(range(0, n_paths, BLOCK)):
        nb = min(BLOCK, n_paths - start)
        rng = _stream(seed, b)
        if cp is not None:
            k = pairs[rng.choice(pairs.size, size=nb, p=probs)]
            x0 = nodes[k % ncol]
            v_blocks.append(vnodes[k // ncol])
        else:
            x0 = nodes[sup[rng.choice(sup.size, size=nb, p=probs)]]
        noise = rng.standard_normal((nb, tg.n_steps))
        if noise_scale != 1.0:
            noise *= noise_scale
        out, escaped = K.euler_paths(np.ascontiguousarray(x0), noise, drift, drift_dt, grid.x_min, grid.h,
                                     tg.dt, record)
        esc += int(escaped.sum())
        if record:
            pos_blocks.append(out)
            end_blocks.append(out[:, [0, -1]])
        else:
            end_blocks.append(out)
    positions = np.concatenate(pos_blocks) if record else None
    endpoints = np.concatenate(end_blocks)
    if cp is not None:
        v = np.concatenate(v_blocks)
    elif spec.terminal_target is not None:
        v = comonotone_assign(endpoints[:, 1], spec.terminal_target)
    else:
        v = None
    frac = esc / n_paths
    if frac > ESCAPE_LIMIT:
        log.warning("%.2f%% of paths hit the grid boundary", 100 * frac)
    for a in (positions, endpoints, v):
        if a is not None:
            a.setflags(write=False)
    return PathEnsemble(int(n_paths), positions, endpoints, v, int(seed), frac, spec, noise_scale)


def _require_ok(ens: PathEnsemble):
    if ens.flagged:
        raise FlaggedEnsemble(f"{100 * ens.escape_fraction:.2f}% of paths escaped the grid")


def path_actions(ens: PathEnsemble, model: LagrangianModel, drift: Optional[DriftField] = None) -> np.ndarray:
    """Per-path left-endpoint action sum_k L(t_k, X_k, beta(t_k, X_k)) dt."""
    _require_ok(ens)
    if ens.positions is None:
        raise ValidationError("action needs recorded positions")
    drift = ens.spec.drift if drift is None else drift
    grid = drift.space_grid
    tg = ens.spec.time_grid
    tab = np.ascontiguousarray(drift.values, dtype=float)
    args = (ens.positions, tab, drift.time_grid.dt, grid.x_min, grid.h, tg.dt)
    times = tg.times[:-1]
    if model.is_quadratic:
        act = K.kinetic_action(*args)
        if model.has_potential:
            X = ens.positions[:, :-1]
            act = act + tg.dt * np.sum(model.ell(times[None, :], X), axis=1)
        return act
    beta = K.drift_along(*args)
    beta = np.clip(beta, -model.v_max, model.v_max)
    act = np.zeros(ens.n_paths)
    for k, t in enumerate(times):
        act += eval_L(model, t, ens.positions[:, k], beta[:, k])
    return act * tg.dt


def estimate_action(ens: PathEnsemble, model: LagrangianModel, drift: Optional[DriftField] = None) -> ActionEstimate:
    return _estimate(path_actions(ens, model, drift))


def objective_samples(ens: PathEnsemble, kind: str, model: LagrangianModel) -> np.ndarray:
    if ens.v_samples is None:
        raise ValidationError("ensemble carries no V samples")
    act = path_actions(ens, model)
    if kind == "min":
        return ens.v_samples * ens.x0 + act
    if kind == "max":
        return ens.v_samples * ens.xT - act
    raise ValidationError("kind must be 'min' or 'max'")


def estimate_ballistic_objective(ens: PathEnsemble, kind: str, model: LagrangianModel) -> ActionEstimate:
    """Mean of <V, X(0)> + action (min) or <V, X(T)> - action (max)."""
    return _estimate(objective_samples(ens, kind, model))


def empirical_terminal_law(ens: PathEnsemble, grid: Optional[SpaceGrid] = None) -> GridMeasure:
    """Law of X(T), each sample split linearly between its two nearest nodes."""
    _require_ok(ens)
    grid = ens.spec.drift.space_grid if grid is None else grid
    return binned_measure(ens.xT, grid)


def violating_pair_fraction(a, b, orientation: str) -> float:
    """Fraction of path pairs whose (a, b) order contradicts a monotone map.

    Comonotone pairs violate when a_i < a_j and b_i > b_j; antimonotone pairs
    when a_i < a_j and b_i < b_j. Counted exactly with a Fenwick tree.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    n = a.size
    if n < 2:
        return 0.0
    if orientation == "comonotone":
        b = -b
    elif orientation != "antimonotone":
        raise ValidationError("orientation must be comonotone or antimonotone")
    _, ra = np.unique(a, return_inverse=True)
    ub, rb = np.unique(b, return_inverse=True)
    order = np.argsort(ra, kind="stable")
    bad = K.count_concordant(ra[order].astype(np.int64), rb[order].astype(np.int64), ub.size)
    return float(bad) / (n * (n - 1) / 2)
