"""Command-line front end.

    ballistic-ot solve <config.yaml>     value + certificate + CSV matrices
    ballistic-ot gap <config.yaml>       every available route and the weak-duality chain
    ballistic-ot simulate <config.yaml>  optimal process recovery and Monte Carlo check
    ballistic-ot check <config.yaml>     assumption report for the Lagrangian

Exit codes: 0 success, 2 configuration error, 3 solver failure, 4 validation failure.
Errors are reported on stderr as one JSON object with a ``category`` field.

CSV conventions: the first column is the grid coordinate (``x``) or time
(``t``); the header row is always present. Value and drift fields are stored
one row per (subsampled) time level with one column per grid node.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import platform
import sys
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import yaml

from . import __version__
from .ballistic import (BallisticDualConfig, InterpolationConfig, adjudicate_sign, b_max_delta_closed_form,
                        b_max_dual, b_max_interpolate, b_min_dual, b_min_interpolate, recover_max_process,
                        recover_min_process)
from .dynamic_cost import DualAscentConfig, c_dual_ascent, jensen_lower_bound, schrodinger_oracle
from .errors import SolverFailure, ValidationError
from .grid_measures import (GridMeasure, SpaceGrid, TimeGrid, atomic, dirac, flip, gaussian, gaussian_mixture,
                            make_measure, w1_metric)
from .hjb_solver import (MINUS_H, PLUS_H, SchemeConfig, extract_drift, hopf_cole_solve, pde_residual,
                         solve_hjb_backward)
from .lagrangian import (GridFunction, HamiltonianModel, LagrangianModel, SamplingConfig, check_assumptions,
                         default_v_max)
from .sde_sim import (empirical_terminal_law, estimate_action, estimate_ballistic_objective, make_process_spec,
                      simulate, violating_pair_fraction)
from .wasserstein import lp_transport, quantile_coupling, w_max, w_min

log = logging.getLogger("ballistic_ot")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_VALIDATION = 0, 2, 3, 4

PROBLEMS = ("c_cost", "b_min", "b_max", "hjb", "wasserstein")
ROLES = {
    "c_cost": ("nu0", "nuT"),
    "b_min": ("mu0", "nuT"),
    "b_max": ("nu0", "muT"),
    "wasserstein": ("mu", "nu"),
    "hjb": (),
}
METHODS = {
    "c_cost": ("dual", "oracle"),
    "b_min": ("interpolate", "dual"),
    "b_max": ("interpolate", "dual", "closed_form"),
    "hjb": ("finite_difference", "hopf_cole"),
    "wasserstein": ("quantile", "lp"),
}
MEASURE_FAMILIES = ("dirac", "gaussian", "two_atom", "atoms", "mixture", "weights_file")
TERMINAL_FAMILIES = ("affine", "sine", "concave_quadratic", "values_file")
FIELD_ROWS = 65


class ConfigError(Exception):
    """Malformed or incomplete configuration."""


# ---------------------------------------------------------------------------
# configuration

@dataclass
class RunConfig:
    problem: str
    grid: dict
    lagrangian: dict
    measures: dict
    solver: dict
    output: dict
    terminal: Optional[dict] = None
    base_dir: str = field(default=".", repr=False)

    def canonical(self) -> dict:
        out = {"problem": self.problem, "grid": self.grid, "lagrangian": self.lagrangian,
               "measures": self.measures, "solver": self.solver, "output": self.output}
        if self.terminal is not None:
            out["terminal"] = self.terminal
        return out

    def digest(self) -> str:
        text = json.dumps(self.canonical(), sort_keys=True, default=str)
        return hashlib.sha256(text.encode()).hexdigest()


_GRID_KEYS = {"x_min": float, "x_max": float, "n_nodes": int, "T": float, "n_steps": (int, type(None))}
_LAG_KEYS = {"kind", "potential", "v_max", "delta", "alpha", "U", "n_v"}
_SOLVER_KEYS = {"method", "max_iters", "n_paths", "seed", "search", "sign", "scheme", "sense", "tolerance"}
_OUTPUT_KEYS = {"dir", "formats"}


def _need(d: dict, key: str, where: str):
    if key not in d:
        raise ConfigError(f"{where}: missing key {key!r}")
    return d[key]


def _number(value, where: str, kind=float):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{where}: expected a number, got {value!r}")
    if kind is int and not float(value).is_integer():
        raise ConfigError(f"{where}: expected an integer, got {value!r}")
    return kind(value)


def _mapping(value, where: str) -> dict:
    if not isinstance(value, dict):
        raise ConfigError(f"{where}: expected a mapping")
    return value


def _check_keys(d: dict, allowed, where: str):
    extra = set(d) - set(allowed)
    if extra:
        raise ConfigError(f"{where}: unknown keys {sorted(extra)}")


def _check_measure_spec(spec, where: str, base_dir: str):
    spec = _mapping(spec, where)
    fam = _need(spec, "family", where)
    if fam not in MEASURE_FAMILIES:
        raise ConfigError(f"{where}: unknown family {fam!r}")
    if fam == "dirac":
        _number(_need(spec, "x", where), where + ".x")
    elif fam == "gaussian":
        _number(_need(spec, "mean", where), where + ".mean")
        _number(_need(spec, "std", where), where + ".std")
    elif fam == "two_atom":
        locs = _need(spec, "locations", where)
        if not isinstance(locs, list) or len(locs) != 2:
            raise ConfigError(f"{where}.locations: expected two numbers")
        [_number(v, where + ".locations") for v in locs]
        _number(spec.get("p", 0.5), where + ".p")
    elif fam == "atoms":
        for key in ("locations", "masses"):
            vals = _need(spec, key, where)
            if not isinstance(vals, list) or not vals:
                raise ConfigError(f"{where}.{key}: expected a nonempty list")
            [_number(v, f"{where}.{key}") for v in vals]
    elif fam == "mixture":
        for key in ("means", "stds", "weights"):
            vals = _need(spec, key, where)
            if not isinstance(vals, list) or not vals:
                raise ConfigError(f"{where}.{key}: expected a nonempty list")
            [_number(v, f"{where}.{key}") for v in vals]
    elif fam == "weights_file":
        path = _resolve(_need(spec, "path", where), base_dir)
        if not os.path.isfile(path):
            raise ConfigError(f"{where}.path: file {path!r} does not exist")


def _check_terminal_spec(spec, base_dir: str):
    spec = _mapping(spec, "terminal")
    fam = _need(spec, "family", "terminal")
    if fam not in TERMINAL_FAMILIES:
        raise ConfigError(f"terminal: unknown family {fam!r}")
    for key, val in spec.items():
        if key not in ("family", "path"):
            _number(val, f"terminal.{key}")
    if fam == "values_file":
        path = _resolve(_need(spec, "path", "terminal"), base_dir)
        if not os.path.isfile(path):
            raise ConfigError(f"terminal.path: file {path!r} does not exist")


def _resolve(path, base_dir: str) -> str:
    if not isinstance(path, str):
        raise ConfigError(f"expected a path string, got {path!r}")
    return path if os.path.isabs(path) else os.path.join(base_dir, path)


def parse_config(text: str, base_dir: str = ".") -> RunConfig:
    """Parse and schema-check a YAML run configuration (raises ConfigError)."""
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"YAML parse error: {exc}") from None
    raw = _mapping(raw, "config")
    _check_keys(raw, {"problem", "grid", "lagrangian", "measures", "solver", "output", "terminal"}, "config")
    problem = _need(raw, "problem", "config")
    if problem not in PROBLEMS:
        raise ConfigError(f"problem must be one of {PROBLEMS}, got {problem!r}")

    grid = dict(_mapping(_need(raw, "grid", "config"), "grid"))
    _check_keys(grid, _GRID_KEYS, "grid")
    for key in ("x_min", "x_max", "n_nodes"):
        grid[key] = _number(_need(grid, key, "grid"), f"grid.{key}", _GRID_KEYS[key])
    grid["T"] = _number(grid.get("T", 1.0), "grid.T")
    if grid.get("n_steps") is not None:
        grid["n_steps"] = _number(grid["n_steps"], "grid.n_steps", int)
    else:
        grid["n_steps"] = None

    lag = dict(_mapping(raw.get("lagrangian", {"kind": "quadratic"}), "lagrangian"))
    _check_keys(lag, _LAG_KEYS, "lagrangian")
    lag.setdefault("kind", "quadratic")
    if lag["kind"] not in ("quadratic", "power"):
        raise ConfigError(f"lagrangian.kind must be quadratic or power, got {lag['kind']!r}")
    pot = dict(_mapping(lag.get("potential", {"type": "zero"}), "lagrangian.potential"))
    if pot.get("type", "zero") not in ("zero", "harmonic", "periodic"):
        raise ConfigError(f"lagrangian.potential.type: unknown {pot.get('type')!r}")
    pot.setdefault("type", "zero")
    for key, val in pot.items():
        if key != "type":
            _number(val, f"lagrangian.potential.{key}")
    lag["potential"] = pot
    for key in ("v_max", "delta", "alpha", "U", "n_v"):
        if lag.get(key) is not None:
            lag[key] = _number(lag[key], f"lagrangian.{key}", int if key == "n_v" else float)

    base_dir = os.path.abspath(base_dir)
    measures = dict(_mapping(raw.get("measures", {}), "measures"))
    for role in ROLES[problem]:
        _check_measure_spec(_need(measures, role, "measures"), f"measures.{role}", base_dir)
    for role, spec in measures.items():
        if role not in ROLES[problem]:
            if problem == "hjb" and role == "nu0":
                _check_measure_spec(spec, "measures.nu0", base_dir)
            else:
                raise ConfigError(f"measures: role {role!r} is not used by problem {problem!r}")

    terminal = raw.get("terminal")
    if problem == "hjb":
        if terminal is None:
            raise ConfigError("hjb problem needs a terminal section")
        _check_terminal_spec(terminal, base_dir)
    elif terminal is not None:
        raise ConfigError("terminal section is only used by the hjb problem")

    solver = dict(_mapping(raw.get("solver", {}), "solver"))
    _check_keys(solver, _SOLVER_KEYS, "solver")
    solver.setdefault("method", METHODS[problem][0])
    if solver["method"] not in METHODS[problem]:
        raise ConfigError(f"solver.method for {problem} must be one of {METHODS[problem]}")
    solver["seed"] = _number(solver.get("seed", 0), "solver.seed", int)
    solver["n_paths"] = _number(solver.get("n_paths", 20000), "solver.n_paths", int)
    if solver.get("max_iters") is not None:
        solver["max_iters"] = _number(solver["max_iters"], "solver.max_iters", int)
    if solver.get("tolerance") is not None:
        solver["tolerance"] = _number(solver["tolerance"], "solver.tolerance")
    solver.setdefault("search", "blocks")
    solver.setdefault("sign", PLUS_H)
    solver.setdefault("scheme", "lax_friedrichs")
    solver.setdefault("sense", "min")
    if solver["sign"] not in (PLUS_H, MINUS_H):
        raise ConfigError(f"solver.sign must be {PLUS_H} or {MINUS_H}")
    if solver["scheme"] not in ("lax_friedrichs", "upwind"):
        raise ConfigError("solver.scheme must be lax_friedrichs or upwind")
    if solver["sense"] not in ("min", "max"):
        raise ConfigError("solver.sense must be min or max")
    if solver["search"] not in ("blocks", "translate", "location_scale"):
        raise ConfigError("solver.search must be blocks, translate or location_scale")

    output = dict(_mapping(raw.get("output", {}), "output"))
    _check_keys(output, _OUTPUT_KEYS, "output")
    output.setdefault("dir", "out")
    output.setdefault("formats", ["json", "csv"])
    if not isinstance(output["formats"], list) or not set(output["formats"]) <= {"json", "csv"}:
        raise ConfigError("output.formats must be a list drawn from json, csv")
    return RunConfig(problem, grid, lag, measures, solver, output, terminal, base_dir)


def load_config(path: str) -> RunConfig:
    if not os.path.isfile(path):
        raise ConfigError(f"config file {path!r} not found")
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    return parse_config(text, os.path.dirname(os.path.abspath(path)))


# ---------------------------------------------------------------------------
# instance construction (raises ValidationError on domain problems)

@dataclass
class Instance:
    config: RunConfig
    grid: SpaceGrid
    model: LagrangianModel
    measures: dict
    terminal: Optional[GridFunction] = None


def _read_table(path: str) -> np.ndarray:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, -1]


def build_measure(spec: dict, grid: SpaceGrid, base_dir: str) -> GridMeasure:
    fam = spec["family"]
    if fam == "dirac":
        return dirac(grid, float(spec["x"]))
    if fam == "gaussian":
        return gaussian(grid, float(spec["mean"]), float(spec["std"]))
    if fam == "two_atom":
        p = float(spec.get("p", 0.5))
        return atomic(grid, spec["locations"], [p, 1.0 - p])
    if fam == "atoms":
        return atomic(grid, spec["locations"], spec["masses"])
    if fam == "mixture":
        return gaussian_mixture(grid, spec["means"], spec["stds"], spec["weights"])
    w = _read_table(_resolve(spec["path"], base_dir))
    if w.size != grid.size:
        raise ValidationError(f"weights file has {w.size} rows, grid has {grid.size} nodes")
    return make_measure(w, grid)


def _potential(spec: dict):
    kind = spec.get("type", "zero")
    if kind == "zero":
        return None
    if kind == "harmonic":
        k = float(spec.get("k", 1.0))
        return lambda t, x: 0.5 * k * np.asarray(x) ** 2 + 0.0 * np.asarray(t)
    a = float(spec.get("a", 1.0))
    return lambda t, x: a * (1.0 + np.sin(np.asarray(x)) ** 2) + 0.0 * np.asarray(t)


def build_model(lag: dict, grid: SpaceGrid, T: float) -> LagrangianModel:
    pot = _potential(lag["potential"])
    if lag["kind"] == "quadratic":
        return LagrangianModel.quadratic(grid, T, pot, lag.get("v_max"))
    delta = float(lag.get("delta") or 2.0)
    alpha = float(lag.get("alpha") or 0.5)
    v_max = float(lag.get("v_max") or min(8.0, default_v_max(grid, T)))
    n_v = int(lag.get("n_v") or 401)
    ell = pot or (lambda t, x: 0.0 * np.asarray(x))

    def func(t, x, v):
        return alpha * np.abs(v) ** delta + ell(t, x)

    return LagrangianModel.tabulate(func, grid.nodes, np.linspace(-v_max, v_max, n_v), T,
                                    delta=delta, alpha=alpha, U=float(lag.get("U") or 0.0))


def build_terminal(spec: dict, grid: SpaceGrid, base_dir: str) -> GridFunction:
    x = grid.nodes
    fam = spec["family"]
    if fam == "affine":
        vals = float(spec.get("slope", 1.0)) * x + float(spec.get("intercept", 0.0))
    elif fam == "sine":
        vals = float(spec.get("amplitude", 1.0)) * np.sin(float(spec.get("frequency", 1.0)) * x)
    elif fam == "concave_quadratic":
        vals = -0.5 * float(spec.get("curvature", 1.0)) * x ** 2
    else:
        vals = _read_table(_resolve(spec["path"], base_dir))
        if vals.size != grid.size:
            raise ValidationError(f"terminal file has {vals.size} rows, grid has {grid.size} nodes")
    return GridFunction(grid, vals)


def build_instance(cfg: RunConfig) -> Instance:
    g = cfg.grid
    grid = SpaceGrid(g["x_min"], g["x_max"], g["n_nodes"])
    if not g["T"] > 0:
        raise ValidationError("grid.T must be positive")
    if g["n_steps"] is not None and g["n_steps"] < 1:
        raise ValidationError("grid.n_steps must be positive")
    model = build_model(cfg.lagrangian, grid, g["T"])
    measures = {role: build_measure(spec, grid, cfg.base_dir) for role, spec in cfg.measures.items()}
    terminal = build_terminal(cfg.terminal, grid, cfg.base_dir) if cfg.terminal is not None else None
    if cfg.solver["n_paths"] < 1:
        raise ValidationError("solver.n_paths must be positive")
    if cfg.solver.get("max_iters") is not None and cfg.solver["max_iters"] < 1:
        raise ValidationError("solver.max_iters must be positive")
    if cfg.problem == "b_max" and cfg.solver["method"] == "closed_form":
        if measures["muT"].support.size != 1:
            raise ValidationError("closed_form needs a Dirac muT")
    if cfg.problem in ("c_cost", "b_min", "b_max") and cfg.solver["method"] == "oracle" \
            and not (model.is_quadratic and not model.has_potential):
        raise ValidationError("the oracle needs the quadratic Lagrangian with zero potential")
    return Instance(cfg, grid, model, measures, terminal)


# ---------------------------------------------------------------------------
# numbers with provenance

def num(value, operation: str, **tolerances) -> dict:
    """A reported number together with the operation that produced it."""
    v = None if value is None else float(value)
    return {"value": v, "provenance": {"operation": operation, "tolerances": tolerances}}


def _ascent_cfg(inst: Instance, default_iters: int) -> DualAscentConfig:
    s = inst.config.solver
    kw = {"max_iters": s.get("max_iters") or default_iters, "scheme": SchemeConfig(scheme=s["scheme"])}
    if s.get("tolerance") is not None:
        kw["tolerance"] = s["tolerance"]
    return DualAscentConfig(**kw)


def _interp_cfg(inst: Instance) -> InterpolationConfig:
    s = inst.config.solver
    kw = {"search": s["search"]}
    if s.get("max_iters") is not None:
        kw["max_iters"] = s["max_iters"]
    if s.get("tolerance") is not None:
        kw["tolerance"] = s["tolerance"]
    return InterpolationConfig(**kw)


def _dual_cfg(inst: Instance) -> BallisticDualConfig:
    s = inst.config.solver
    base = BallisticDualConfig()
    asc = base.ascent
    kw = {"scheme": SchemeConfig(scheme=s["scheme"])}
    if s.get("max_iters") is not None:
        kw["max_iters"] = s["max_iters"]
    if s.get("tolerance") is not None:
        kw["tolerance"] = s["tolerance"]
    return BallisticDualConfig(ascent=DualAscentConfig(**{**asc.__dict__, **kw}), sign=s["sign"])


# ---------------------------------------------------------------------------
# output helpers

class Outputs:
    """Collects artifacts in memory; nothing touches the disk until ``flush``."""

    def __init__(self, formats):
        self.formats = set(formats)
        self.files = {}

    def json(self, name: str, obj):
        if "json" in self.formats or name == "metadata.json":
            self.files[name] = json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"

    def csv(self, name: str, header, rows):
        if "csv" not in self.formats:
            return
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) for v in row])
        self.files[name] = buf.getvalue()

    def flush(self, out_dir: str):
        os.makedirs(out_dir, exist_ok=True)
        for name in sorted(self.files):
            with open(os.path.join(out_dir, name), "w", encoding="utf-8", newline="") as fh:
                fh.write(self.files[name])
        return sorted(self.files)


def _measures_csv(out: Outputs, name: str, grid: SpaceGrid, cols: dict):
    names = sorted(cols)
    rows = np.column_stack([grid.nodes] + [cols[k].weights for k in names])
    out.csv(name, ["x"] + names, rows)


def _field_csv(out: Outputs, name: str, times, grid: SpaceGrid, values):
    idx = np.unique(np.linspace(0, len(times) - 1, min(FIELD_ROWS, len(times))).round().astype(int))
    header = ["t"] + [f"x={x!r}" for x in grid.nodes.tolist()]
    out.csv(name, header, np.column_stack([np.asarray(times)[idx], np.asarray(values)[idx]]))


def _function_csv(out: Outputs, name: str, grid: SpaceGrid, values, label: str):
    out.csv(name, ["x", label], np.column_stack([grid.nodes, values]))


def _coupling_csv(out: Outputs, name: str, cp):
    rows = cp.row_measure.support
    cols = cp.col_measure.support
    xr = cp.row_measure.grid.nodes
    xc = cp.col_measure.grid.nodes
    header = ["x"] + [f"y={y!r}" for y in xc[cols].tolist()]
    out.csv(name, header, np.column_stack([xr[rows], cp.plan[np.ix_(rows, cols)]]))


# ---------------------------------------------------------------------------
# solvers behind each problem

def _solve_c(inst: Instance, out: Optional[Outputs]):
    s = inst.config.solver
    nu0, nuT = inst.measures["nu0"], inst.measures["nuT"]
    T = inst.model.horizon
    if s["method"] == "oracle":
        val = schrodinger_oracle(nu0, nuT, T)
        return {"value": num(val, "schrodinger_oracle", sinkhorn_tol=1e-10)}, None
    cfg = _ascent_cfg(inst, 500)
    cert = c_dual_ascent(nu0, nuT, inst.model, cfg)
    res = {
        "value": num(cert.dual_value, "c_dual_ascent", tolerance=cfg.tolerance, max_iters=cfg.max_iters),
        "iterations": num(cert.iterations, "c_dual_ascent"),
        "status": cert.status,
    }
    if out is not None:
        _function_csv(out, "dual_potential.csv", inst.grid, cert.argmax_f.values, "f")
        vf = cert.value_field
        _field_csv(out, "value_field.csv", vf.time_grid.times, inst.grid, vf.values)
        drift = extract_drift(vf, HamiltonianModel(inst.model, _ham_mode(inst.model)))
        _field_csv(out, "drift.csv", drift.time_grid.times, inst.grid, drift.values)
        _measures_csv(out, "measures.csv", inst.grid, {"nu0": nu0, "nuT": nuT})
    return res, cert


def _ham_mode(model: LagrangianModel) -> str:
    return "closed_form" if model.is_quadratic else "discrete_sup"


def _solve_b(inst: Instance, out: Optional[Outputs], method: Optional[str] = None):
    s = inst.config.solver
    method = method or s["method"]
    kind = "min" if inst.config.problem == "b_min" else "max"
    if kind == "min":
        dual, fixed = inst.measures["mu0"], inst.measures["nuT"]
    else:
        fixed, dual = inst.measures["nu0"], inst.measures["muT"]
    if method == "closed_form":
        u = float(dual.grid.nodes[dual.support[0]])
        val = b_max_delta_closed_form(fixed, u, inst.model, s["sign"])
        return {"value": num(val, "b_max_delta_closed_form", sign=s["sign"])}, None
    if method == "interpolate":
        cfg = _interp_cfg(inst)
        fn = b_min_interpolate if kind == "min" else b_max_interpolate
        sol = fn(inst.measures[ROLES[inst.config.problem][0]], inst.measures[ROLES[inst.config.problem][1]],
                 inst.model, cfg)
        op = fn.__name__
        tol = {"search": cfg.search, "tolerance": cfg.tolerance, "max_iters": cfg.max_iters}
    else:
        cfg = _dual_cfg(inst)
        if kind == "min":
            sol = b_min_dual(dual, fixed, inst.model, cfg)
            op = "b_min_dual"
        else:
            sol = b_max_dual(fixed, dual, inst.model, cfg)
            op = "b_max_dual"
        tol = {"taus": list(cfg.taus), "tolerance": cfg.ascent.tolerance, "max_iters": cfg.ascent.max_iters,
               "sign": sol.details.get("sign")}
    res = {"value": num(sol.value, op, **tol), "method": sol.method}
    iters = sol.details.get("iterations")
    if iters is not None:
        res["iterations"] = num(iters, op)
    if out is not None:
        meas = {"dual_measure": dual, "space_measure": fixed}
        if sol.interpolant is not None:
            meas["interpolant"] = sol.interpolant
        _measures_csv(out, "measures.csv", inst.grid, meas)
        if sol.dual_potential is not None:
            _function_csv(out, "dual_potential.csv", inst.grid, sol.dual_potential.values, "potential")
        if sol.value_field is not None:
            vf = sol.value_field
            _field_csv(out, "value_field.csv", vf.time_grid.times, inst.grid, vf.values)
        if sol.interpolant is not None:
            cp = (quantile_coupling(dual, sol.interpolant, "antimonotone") if kind == "min"
                  else quantile_coupling(sol.interpolant, dual, "comonotone"))
            _coupling_csv(out, "coupling.csv", cp)
    return res, sol


def _solve_hjb(inst: Instance, out: Optional[Outputs], method: Optional[str] = None):
    s = inst.config.solver
    method = method or s["method"]
    ham = HamiltonianModel(inst.model, _ham_mode(inst.model))
    g = inst.config.grid
    if method == "hopf_cole":
        n = g["n_steps"] or 200
        field_ = hopf_cole_solve(inst.terminal, inst.model, TimeGrid(inst.model.horizon, n))
        op = "hopf_cole_solve"
        res = {}
    else:
        tg = TimeGrid(inst.model.horizon, g["n_steps"]) if g["n_steps"] else None
        field_ = solve_hjb_backward(inst.terminal, ham, s["sign"], SchemeConfig(scheme=s["scheme"]), tg)
        op = "solve_hjb_backward"
        res = {"n_steps": num(field_.time_grid.n_steps, op), "theta": num(field_.theta, op)}
    resid = pde_residual(field_, ham)
    res["max_residual"] = num(np.abs(resid).max(), "pde_residual", norm="max", interior=True)
    res["value_at_0"] = num(None, op)
    if "nu0" in inst.measures:
        res["value_at_0"] = num(inst.measures["nu0"].weights @ field_.initial, op, integrated_against="nu0")
    else:
        res["value_at_0"] = num(np.interp(0.0, inst.grid.nodes, field_.initial), op, evaluated_at=0.0)
    if inst.config.terminal["family"] == "affine" and inst.model.is_quadratic and not inst.model.has_potential:
        a = float(inst.config.terminal.get("slope", 1.0))
        b = float(inst.config.terminal.get("intercept", 0.0))
        t = field_.time_grid.times[:, None]
        exact = a * inst.grid.nodes[None, :] + b + 0.5 * a * a * (inst.model.horizon - t)
        res["max_error_vs_affine_solution"] = num(np.abs(field_.values - exact).max(), op, norm="max")
    if out is not None:
        _field_csv(out, "value_field.csv", field_.time_grid.times, inst.grid, field_.values)
        if method != "hopf_cole":
            drift = extract_drift(field_, ham)
            _field_csv(out, "drift.csv", drift.time_grid.times, inst.grid, drift.values)
        _function_csv(out, "terminal.csv", inst.grid, inst.terminal.values, "f")
    return res, field_


def _solve_w(inst: Instance, out: Optional[Outputs], method: Optional[str] = None):
    s = inst.config.solver
    method = method or s["method"]
    mu, nu = inst.measures["mu"], inst.measures["nu"]
    sense = s["sense"]
    if method == "lp":
        val, plan = lp_transport(mu, nu, sense)
        res = {"value": num(val, "lp_transport", sense=sense)}
        return res, None
    val, cp = (w_min if sense == "min" else w_max)(mu, nu)
    op = "w_min" if sense == "min" else "w_max"
    res = {"value": num(val, op, exact=True), "marginal_error": num(cp.marginal_error(), op)}
    if out is not None:
        _coupling_csv(out, "coupling.csv", cp)
        _measures_csv(out, "measures.csv", inst.grid, {"mu": mu, "nu": nu})
    return res, cp


_SOLVERS = {"c_cost": _solve_c, "b_min": _solve_b, "b_max": _solve_b, "hjb": _solve_hjb, "wasserstein": _solve_w}


# ---------------------------------------------------------------------------
# commands

def cmd_solve(inst: Instance, out: Outputs) -> dict:
    res, _ = _SOLVERS[inst.config.problem](inst, out)
    return {"command": "solve", "problem": inst.config.problem, "method": inst.config.solver["method"],
            "config_sha256": inst.config.digest(), "results": res}


def _check(name: str, lhs, rhs, tol: float, op: str, relation: str = "<=") -> dict:
    lhs_v, rhs_v = float(lhs["value"]), float(rhs["value"])
    if relation == "<=":
        ok = lhs_v <= rhs_v + tol
    else:
        ok = abs(lhs_v - rhs_v) <= tol
    return {"name": name, "relation": relation, "lhs": lhs, "rhs": rhs, "budget": num(tol, op),
            "slack": num(rhs_v + tol - lhs_v if relation == "<=" else tol - abs(lhs_v - rhs_v), op),
            "passed": bool(ok)}


def cmd_gap(inst: Instance, out: Outputs) -> dict:
    """Run every available route and check the weak-duality chain against a tolerance budget."""
    p = inst.config.problem
    s = inst.config.solver
    checks, values = [], {}
    if p == "c_cost":
        nu0, nuT = inst.measures["nu0"], inst.measures["nuT"]
        res, cert = _solve_c_dual(inst)
        values["dual"] = res["value"]
        values["jensen"] = num(jensen_lower_bound(nu0, nuT, inst.model), "jensen_lower_bound")
        checks.append(_check("jensen <= dual", values["jensen"], values["dual"], 1e-9, "gap"))
        exact = inst.model.is_quadratic and not inst.model.has_potential
        if exact:
            oracle = schrodinger_oracle(nu0, nuT, inst.model.horizon)
            values["oracle"] = num(oracle, "schrodinger_oracle", sinkhorn_tol=1e-10)
            budget = max(0.02 * abs(oracle), 2e-2)
            checks.append(_check("dual <= oracle * 1.02 (floor 2e-2)", values["dual"], values["oracle"],
                                 budget, "gap"))
            checks.append(_check("|oracle - dual| within budget", values["dual"], values["oracle"], budget,
                                 "gap", relation="~"))
        drift = extract_drift(cert.value_field, HamiltonianModel(inst.model, _ham_mode(inst.model)))
        spec = make_process_spec(nu0, drift)
        ens = simulate(spec, s["n_paths"], s["seed"])
        est = estimate_action(ens, inst.model)
        values["primal"] = num(est.mean, "estimate_action", n_paths=est.n_paths, seed=s["seed"])
        values["primal_se"] = num(est.std_error, "estimate_action")
        values["terminal_w1"] = num(w1_metric(empirical_terminal_law(ens), nuT), "w1_metric")
        upper = values.get("oracle", values["dual"])
        checks.append(_check("oracle <= primal + 3 s.e.", upper, values["primal"], 3 * est.std_error, "gap"))
    elif p in ("b_min", "b_max"):
        kind = "min" if p == "b_min" else "max"
        r_int, _ = _solve_b(inst, None, "interpolate")
        r_dual, _ = _solve_b(inst, None, "dual")
        values["interpolation"], values["dual"] = r_int["value"], r_dual["value"]
        tol = 5e-2
        if kind == "min":
            checks.append(_check("dual <= interpolation", values["dual"], values["interpolation"], tol, "gap"))
        else:
            checks.append(_check("interpolation <= dual", values["interpolation"], values["dual"], tol, "gap"))
        checks.append(_check("|interpolation - dual| within budget", values["interpolation"], values["dual"],
                             tol, "gap", relation="~"))
        if kind == "max" and inst.measures["muT"].support.size == 1:
            r_cf, _ = _solve_b(inst, None, "closed_form")
            values["closed_form"] = r_cf["value"]
            checks.append(_check("|closed form - dual|", values["closed_form"], values["dual"], tol, "gap",
                                 relation="~"))
            u = float(inst.grid.nodes[inst.measures["muT"].support[0]])
            adj = adjudicate_sign(inst.measures["nu0"], [u], inst.model, s["n_paths"], s["seed"], tol)
            values["sign_adjudication"] = _adjudication_json(adj, s)
            checks.append({"name": "configured sign matches Monte Carlo adjudication",
                           "selected": adj["selected"], "configured": s["sign"],
                           "passed": adj["selected"] == s["sign"]})
    elif p == "hjb":
        r_fd, fd = _solve_hjb(inst, None, "finite_difference")
        values.update({f"finite_difference.{k}": v for k, v in r_fd.items()})
        checks.append(_check("max residual <= 1e-3", r_fd["max_residual"], num(0.0, "gap"), 1e-3, "gap"))
        if inst.model.is_quadratic and not inst.model.has_potential:
            hc = hopf_cole_solve(inst.terminal, inst.model, fd.time_grid)
            n = inst.grid.size
            sl = slice(n // 4, n - n // 4)
            gap = np.abs(hc.values[:, sl] - fd.values[:, sl]).max()
            values["hopf_cole_gap"] = num(gap, "hopf_cole_solve", window="middle half", norm="max")
            checks.append(_check("|finite difference - hopf cole| <= 5e-2", values["hopf_cole_gap"],
                                 num(0.0, "gap"), 5e-2, "gap"))
    else:
        mu, nu = inst.measures["mu"], inst.measures["nu"]
        sense = s["sense"]
        r_q, _ = _solve_w(inst, None, "quantile")
        values["quantile"] = r_q["value"]
        if mu.support.size <= 64 and nu.support.size <= 64:
            r_lp, _ = _solve_w(inst, None, "lp")
            values["lp"] = r_lp["value"]
            checks.append(_check("|quantile - lp|", values["quantile"], values["lp"], 1e-9, "gap", relation="~"))
        if inst.grid.is_symmetric:
            other = (w_max if sense == "min" else w_min)(flip(mu), nu)[0]
            values["flip"] = num(-other, "w_max" if sense == "min" else "w_min", flipped="mu")
            checks.append(_check("flip identity", values["quantile"], values["flip"], 1e-10, "gap", relation="~"))
    status = "PASS" if all(c["passed"] for c in checks) else "FAIL"
    return {"command": "gap", "problem": p, "config_sha256": inst.config.digest(), "values": values,
            "checks": checks, "status": status}


def _adjudication_json(adj: dict, s: dict) -> dict:
    out = {"selected": adj["selected"]}
    for sign in (PLUS_H, MINUS_H):
        rows = []
        for r in adj[sign]["instances"]:
            rows.append({"u": num(r["u"], "adjudicate_sign"),
                         "hjb_value": num(r["hjb_value"], "adjudicate_sign", sign=sign),
                         "mc_value": None if r["mc_value"] is None else
                         num(r["mc_value"], "estimate_ballistic_objective", n_paths=s["n_paths"], seed=s["seed"]),
                         "mc_se": None if r["mc_se"] is None else num(r["mc_se"], "estimate_ballistic_objective"),
                         "escape_fraction": num(r["escape_fraction"], "simulate"),
                         "agrees": r["agrees"]})
        out[sign] = {"instances": rows, "consistent": adj[sign]["consistent"]}
    return out


def _solve_c_dual(inst: Instance):
    cfg = _ascent_cfg(inst, 500)
    nu0, nuT = inst.measures["nu0"], inst.measures["nuT"]
    cert = c_dual_ascent(nu0, nuT, inst.model, cfg)
    return {"value": num(cert.dual_value, "c_dual_ascent", tolerance=cfg.tolerance,
                         max_iters=cfg.max_iters)}, cert


def cmd_simulate(inst: Instance, out: Outputs) -> dict:
    p = inst.config.problem
    s = inst.config.solver
    if p not in ("c_cost", "b_min", "b_max"):
        raise ValidationError("simulate supports the c_cost, b_min and b_max problems")
    report = {"command": "simulate", "problem": p, "config_sha256": inst.config.digest()}
    n_steps = inst.config.grid["n_steps"]
    if p == "c_cost":
        res, cert = _solve_c_dual(inst)
        drift = extract_drift(cert.value_field, HamiltonianModel(inst.model, _ham_mode(inst.model)))
        spec = make_process_spec(inst.measures["nu0"], drift, n_steps)
        target = inst.measures["nuT"]
        ens = simulate(spec, s["n_paths"], s["seed"])
        est = estimate_action(ens, inst.model)
        report["certificate_value"] = res["value"]
        report["objective"] = num(est.mean, "estimate_action", n_paths=est.n_paths, seed=s["seed"])
    else:
        method = s["method"] if s["method"] != "closed_form" else "dual"
        res, sol = _solve_b(inst, None, method)
        if p == "b_min":
            spec = recover_min_process(sol, inst.model, n_steps)
            target = inst.measures["nuT"]
        else:
            spec = recover_max_process(sol, inst.model, n_steps)
            target = None
        ens = simulate(spec, s["n_paths"], s["seed"])
        kind = "min" if p == "b_min" else "max"
        est = estimate_ballistic_objective(ens, kind, inst.model)
        report["certificate_value"] = res["value"]
        report["objective"] = num(est.mean, "estimate_ballistic_objective", kind=kind, n_paths=est.n_paths,
                                  seed=s["seed"])
        if kind == "min":
            frac = violating_pair_fraction(ens.v_samples, ens.x0, "antimonotone")
            report["violating_pair_fraction"] = num(frac, "violating_pair_fraction", orientation="antimonotone")
        else:
            frac = violating_pair_fraction(ens.v_samples, ens.xT, "comonotone")
            report["violating_pair_fraction"] = num(frac, "violating_pair_fraction", orientation="comonotone")
    report["objective_se"] = num(est.std_error, report["objective"]["provenance"]["operation"])
    report["escape_fraction"] = num(ens.escape_fraction, "simulate")
    report["n_steps"] = num(spec.time_grid.n_steps, "make_process_spec")
    law = empirical_terminal_law(ens)
    cols = {"empirical": law}
    if target is not None:
        report["terminal_w1"] = num(w1_metric(law, target), "w1_metric", reference="target terminal law")
        cols["target"] = target
    diff = abs(float(report["objective"]["value"]) - float(report["certificate_value"]["value"]))
    report["objective_vs_certificate"] = num(diff, "cmd_simulate", budget_se=3.0)
    _measures_csv(out, "terminal_law.csv", inst.grid, cols)
    return report


def cmd_check(inst: Instance, out: Outputs) -> dict:
    g = inst.config.grid
    rep = check_assumptions(inst.model, SamplingConfig(x_min=g["x_min"], x_max=g["x_max"]))
    op = "check_assumptions"
    return {
        "command": "check", "config_sha256": inst.config.digest(),
        "passed": rep.passed, "violations": list(rep.violations),
        "A0": {"ok": rep.a0_ok, "min_L": num(rep.min_L, op)},
        "A1": {"ok": rep.a1_ok, "delta": num(rep.delta, op), "alpha": num(rep.alpha, op), "U": num(rep.U, op),
               "lower_bound_margin": num(rep.lower_bound_margin, op), "declared_bound_ok": rep.declared_bound_ok},
        "A2": {"ok": rep.a2_ok, "modulus": [{"eps": num(e, op), "sup_ratio": num(v, op)}
                                             for e, v in sorted(rep.a2_modulus.items(), reverse=True)]},
        "A3": {"ok": rep.a3_ok, "sup_L0": num(rep.a3_sup_L0, op), "sup_grad_x_ratio": num(rep.a3_sup_grad_x_ratio, op),
               "sup_grad_v": num(rep.a3_sup_grad_v, op)},
        "A4": {"ok": rep.a4_ok, "sup_ratio": num(rep.a4_i, op)},
    }


COMMANDS = {"solve": (cmd_solve, "certificate.json"), "gap": (cmd_gap, "gap_report.json"),
            "simulate": (cmd_simulate, "simulation.json"), "check": (cmd_check, "assumptions.json")}


def _error(category: str, exc: Exception, code: int) -> int:
    sys.stderr.write(json.dumps({"category": category, "type": type(exc).__name__, "message": str(exc)}) + "\n")
    return code


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override solver.seed")
    common.add_argument("--out-dir", default=None, help="override output.dir")
    common.add_argument("--quiet", action="store_true", help="print nothing on success")
    parser = argparse.ArgumentParser(prog="ballistic-ot", description=__doc__.split("\n\n")[0],
                                     parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        sp.add_argument("config")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.solver["seed"] = int(args.seed)
        out_dir = args.out_dir or _resolve(cfg.output["dir"], os.getcwd())
    except ConfigError as exc:
        return _error("config", exc, EXIT_CONFIG)
    func, report_name = COMMANDS[args.command]
    started = time.time()
    try:
        inst = build_instance(cfg)
        out = Outputs(cfg.output["formats"])
        report = func(inst, out)
    except ConfigError as exc:
        return _error("config", exc, EXIT_CONFIG)
    except ValidationError as exc:
        return _error("validation", exc, EXIT_VALIDATION)
    except SolverFailure as exc:
        return _error("solver", exc, EXIT_SOLVER)
    out.json(report_name, report)
    out.json("metadata.json", {
        "command": args.command, "config_path": os.path.abspath(args.config), "config": cfg.canonical(),
        "config_sha256": cfg.digest(), "started_unix": started, "elapsed_seconds": time.time() - started,
        "package_version": __version__, "python": platform.python_version(),
        "numpy": np.__version__, "argv": list(sys.argv if argv is None else argv),
    })
    written = out.flush(out_dir)
    if not args.quiet:
        summary = report.get("status") or report.get("results", {}).get("value", {}).get("value")
        print(f"{args.command}: wrote {len(written)} files to {out_dir}" + (f" ({summary})" if summary is not None else ""))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
