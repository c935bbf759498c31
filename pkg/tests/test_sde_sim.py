import numpy as np
import pytest
from scipy.stats import chisquare

from ballistic_ot import (ANTIMONOTONE, PLUS_H, Coupling, FlaggedEnsemble, GridFunction, GridMismatch,
                          HamiltonianModel, LagrangianModel, SpaceGrid, TimeGrid, ValidationError, atomic, dirac,
                          empirical_terminal_law, estimate_action, estimate_ballistic_objective, extract_drift,
                          gaussian, make_process_spec, quantile_coupling, simulate, solve_hjb_backward,
                          violating_pair_fraction, w1_metric)
from ballistic_ot.hjb_solver import DriftField
from ballistic_ot.sde_sim import path_actions

G = SpaceGrid(-4.0, 4.0, 257)
MODEL = LagrangianModel.quadratic(G)
TG = TimeGrid(1.0, 64)


def _const(u, grid=G, tg=TG):
    return DriftField(tg, grid, np.full((tg.n_steps + 1, grid.size), float(u)))


def test_brownian_moments():
    nu0 = gaussian(G, 0.4, 0.5)
    ens = simulate(make_process_spec(nu0, _const(0.0), 64), 20000, seed=1)
    xT = ens.xT
    n = xT.size
    se_mean = xT.std(ddof=1) / np.sqrt(n)
    assert abs(xT.mean() - nu0.mean) <= 3 * se_mean
    # s.e. of the sample variance for a Gaussian is var * sqrt(2 / (n - 1))
    var = nu0.variance + 1.0
    assert abs(xT.var(ddof=1) - var) <= 3 * var * np.sqrt(2 / (n - 1))


def test_dirac_brownian_variance():
    ens = simulate(make_process_spec(dirac(G, 0.0), _const(0.0), 64), 20000, seed=2)
    assert abs(ens.xT.var(ddof=1) - 1.0) <= 3 * np.sqrt(2 / (ens.n_paths - 1))


def test_constant_drift_mean():
    u = 0.75
    ens = simulate(make_process_spec(dirac(G, 0.0), _const(u)), 20000, seed=3)
    assert abs(ens.xT.mean() - u) <= 3 * ens.xT.std(ddof=1) / np.sqrt(ens.n_paths)


def test_seed_determinism():
    spec = make_process_spec(gaussian(G, 0.0, 0.7), _const(0.3), 64)
    a = simulate(spec, 10000, seed=7)
    b = simulate(spec, 10000, seed=7)
    assert np.array_equal(a.positions, b.positions)
    c = simulate(spec, 10000, seed=8)
    assert not np.array_equal(a.positions, c.positions)
    # a prefix of the paths does not depend on how many more are requested
    d = simulate(spec, 20000, seed=7)
    assert np.array_equal(d.positions[:8192], a.positions[:8192])


def test_initial_positions_follow_initial_law():
    nu0 = atomic(G, [-1.0, 0.0, 0.5, 2.0], [0.1, 0.4, 0.3, 0.2])
    ens = simulate(make_process_spec(nu0, _const(0.0), 8), 10000, seed=4, record=False)
    sup = nu0.support
    counts = np.array([(ens.x0 == G.nodes[i]).sum() for i in sup])
    assert counts.sum() == ens.n_paths
    assert chisquare(counts, ens.n_paths * nu0.weights[sup]).pvalue > 1e-3


def test_action_examples():
    nu0 = gaussian(G, 0.0, 0.5)
    ens = simulate(make_process_spec(nu0, _const(0.0), 64), 2000, seed=5)
    est = estimate_action(ens, MODEL)
    assert est.mean == 0.0 and est.std_error == 0.0
    u = 0.5
    ens = simulate(make_process_spec(nu0, _const(u), 64), 2000, seed=5)
    est = estimate_action(ens, MODEL)
    assert abs(est.mean - u * u / 2) <= 3 * est.std_error + 1e-12
    one = LagrangianModel.quadratic(G, potential=lambda t, x: np.ones_like(x))
    ens = simulate(make_process_spec(nu0, _const(0.0), 64), 2000, seed=5)
    assert estimate_action(ens, one).mean == pytest.approx(1.0, abs=1e-12)


def test_action_std_error_definition():
    nu0 = gaussian(G, 0.0, 0.5)
    drift = DriftField(TG, G, np.tile(0.3 * G.nodes, (TG.n_steps + 1, 1)))
    ens = simulate(make_process_spec(nu0, drift, 64), 3000, seed=6)
    est = estimate_action(ens, MODEL)
    samples = path_actions(ens, MODEL)
    assert est.std_error == pytest.approx(samples.std(ddof=1) / np.sqrt(samples.size), rel=1e-12)
    assert est.n_paths == 3000


def test_objective_with_zero_covector():
    nu0 = gaussian(G, 0.0, 0.5)
    zero = dirac(G, 0.0)
    cp = quantile_coupling(zero, nu0, ANTIMONOTONE)
    ens = simulate(make_process_spec(nu0, _const(0.5), 64, initial_coupling=cp), 2000, seed=9)
    act = estimate_action(ens, MODEL)
    assert estimate_ballistic_objective(ens, "min", MODEL).mean == pytest.approx(act.mean, abs=1e-12)
    ens = simulate(make_process_spec(nu0, _const(0.5), 64, terminal_target=zero), 2000, seed=9)
    assert estimate_ballistic_objective(ens, "max", MODEL).mean == pytest.approx(-act.mean, abs=1e-12)


def test_objective_delta_u():
    u = 1.0
    spec = make_process_spec(dirac(G, 0.0), _const(u), terminal_target=dirac(G, u))
    ens = simulate(spec, 20000, seed=10)
    est = estimate_ballistic_objective(ens, "max", MODEL)
    assert abs(est.mean - 0.5) <= 3 * est.std_error


def test_product_coupling_is_worse_than_antimonotone():
    mu0 = atomic(G, [-1.0, 1.0], [0.5, 0.5])
    nu = gaussian(G, 0.0, 0.8)
    drift = _const(0.0)
    anti = quantile_coupling(mu0, nu, ANTIMONOTONE)
    prod = Coupling(mu0, nu, np.outer(mu0.weights, nu.weights))
    e_anti = estimate_ballistic_objective(simulate(make_process_spec(nu, drift, 64, anti), 20000, seed=11), "min",
                                          MODEL)
    e_prod = estimate_ballistic_objective(simulate(make_process_spec(nu, drift, 64, prod), 20000, seed=11), "min",
                                          MODEL)
    assert e_prod.mean >= e_anti.mean - 3 * max(e_prod.std_error, e_anti.std_error)
    assert e_prod.mean - e_anti.mean > 0.3


def test_std_error_scaling():
    nu0 = gaussian(G, 0.0, 0.5)
    drift = DriftField(TG, G, np.tile(0.5 * np.sin(G.nodes), (TG.n_steps + 1, 1)))
    spec = make_process_spec(nu0, drift, 64)
    for seed in range(3):
        small = estimate_action(simulate(spec, 2000, seed=100 + seed), MODEL).std_error
        large = estimate_action(simulate(spec, 8000, seed=200 + seed), MODEL).std_error
        assert 2 / 1.3 <= small / large <= 2 * 1.3


def test_terminal_law_brownian():
    ens = simulate(make_process_spec(dirac(G, 0.0), _const(0.0), 64), 100000, seed=12, record=False)
    law = empirical_terminal_law(ens, G)
    assert law.weights.sum() == pytest.approx(1.0, abs=1e-12)
    assert w1_metric(law, gaussian(G, 0.0, 1.0)) <= 0.05


def test_terminal_law_without_noise_is_pushforward():
    nu0 = gaussian(G, -0.5, 0.6)
    u = 0.5
    ens = simulate(make_process_spec(nu0, _const(u), 64), 5000, seed=13, noise_scale=0.0, record=False)
    np.testing.assert_allclose(ens.xT, ens.x0 + u, atol=1e-12)
    law = empirical_terminal_law(ens)
    shifted = np.roll(np.bincount(np.searchsorted(G.nodes, ens.x0), minlength=G.size) / ens.n_paths, 16)
    np.testing.assert_allclose(law.weights, shifted, atol=1e-9)


def test_dynamic_programming_consistency():
    ham = HamiltonianModel(MODEL)
    f = GridFunction(G, 0.4 * G.nodes + 0.5 * np.exp(-(G.nodes - 0.5) ** 2))
    phi = solve_hjb_backward(f, ham, PLUS_H)
    drift = extract_drift(phi, ham)
    for x0 in (-0.5, 0.25):
        ens = simulate(make_process_spec(dirac(G, x0), drift), 20000, seed=14)
        samples = np.interp(ens.xT, G.nodes, f.values) - path_actions(ens, MODEL)
        se = samples.std(ddof=1) / np.sqrt(samples.size)
        assert abs(samples.mean() - phi.initial[G.index_of(x0)]) <= 3 * se + 2 * G.h


def test_flagged_ensemble_rejected():
    drift = _const(10.0)
    ens = simulate(make_process_spec(dirac(G, 0.0), drift), 1000, seed=15)
    assert ens.flagged and ens.escape_fraction > 0.5
    with pytest.raises(FlaggedEnsemble):
        estimate_action(ens, MODEL)
    with pytest.raises(FlaggedEnsemble):
        empirical_terminal_law(ens)


def test_violating_pairs():
    a = np.arange(10.0)
    assert violating_pair_fraction(a, a, "comonotone") == 0.0
    assert violating_pair_fraction(a, -a, "antimonotone") == 0.0
    assert violating_pair_fraction(a, -a, "comonotone") == 1.0
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=200), rng.normal(size=200)
    i, j = np.triu_indices(200, 1)
    brute = np.mean((x[i] - x[j]) * (y[i] - y[j]) < 0)
    assert violating_pair_fraction(x, y, "comonotone") == pytest.approx(brute)


def test_rejections():
    spec = make_process_spec(dirac(G, 0.0), _const(0.0), 16)
    with pytest.raises(ValidationError):
        simulate(spec, 0, seed=1)
    with pytest.raises(ValidationError):
        simulate(make_process_spec(dirac(G, 0.0), _const(2.0), 4), 10, seed=1)
    with pytest.raises(GridMismatch):
        make_process_spec(dirac(SpaceGrid(-4.0, 4.0, 129), 0.0), _const(0.0), 16)
    with pytest.raises(ValidationError):
        estimate_ballistic_objective(simulate(spec, 10, seed=1), "min", MODEL)
