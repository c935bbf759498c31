import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ballistic_ot import (ANTIMONOTONE, COMONOTONE, GridFunction, SpaceGrid, ValidationError, atomic, dirac, flip,
                          gaussian, kantorovich_dual_value, kantorovich_lp, make_measure, quantile_coupling, w_max,
                          w_min)
from ballistic_ot.wasserstein import enumerate_vertices, lp_transport
from oracles import lp_inner_product, random_weights

G = SpaceGrid(-2.0, 2.0, 41)
weights41 = st.lists(st.floats(0.0, 5.0, allow_nan=False), min_size=41, max_size=41).filter(lambda w: sum(w) > 1e-3)


def _two_by_two_brute(a, b, x, y, sense):
    """All couplings of two 2-atom laws form a segment; scan it finely."""
    lo = max(0.0, a[0] - b[1])
    hi = min(a[0], b[0])
    best = []
    for p in np.linspace(lo, hi, 2001):
        P = np.array([[p, a[0] - p], [b[0] - p, a[1] - b[0] + p]])
        best.append(np.sum(P * np.outer(x, y)))
    return min(best) if sense == "min" else max(best)


def test_pm_one_examples():
    pm = atomic(G, [-1.0, 1.0], [0.5, 0.5])
    co = quantile_coupling(pm, pm, COMONOTONE)
    anti = quantile_coupling(pm, pm, ANTIMONOTONE)
    i, j = G.index_of(-1.0), G.index_of(1.0)
    assert co.plan[i, i] == 0.5 and co.plan[j, j] == 0.5 and co.cost() == 1.0
    assert anti.plan[i, j] == 0.5 and anti.plan[j, i] == 0.5 and anti.cost() == -1.0
    assert _two_by_two_brute([0.5, 0.5], [0.5, 0.5], [-1, 1], [-1, 1], "max") == pytest.approx(1.0)
    assert _two_by_two_brute([0.5, 0.5], [0.5, 0.5], [-1, 1], [-1, 1], "min") == pytest.approx(-1.0)
    assert w_min(pm, pm)[0] == -1.0 and w_max(pm, pm)[0] == 1.0


def test_dirac_forces_product(rng):
    nu = make_measure(random_weights(rng, G.size, 5), G)
    d = dirac(G, 0.7)
    for orient in (COMONOTONE, ANTIMONOTONE):
        cp = quantile_coupling(nu, d, orient)
        np.testing.assert_allclose(cp.plan, np.outer(nu.weights, d.weights), atol=1e-15)
    assert w_min(d, nu)[0] == pytest.approx(0.7 * nu.mean, abs=1e-14)
    assert w_max(d, nu)[0] == pytest.approx(0.7 * nu.mean, abs=1e-14)


def test_random_two_atom_against_segment_scan(rng):
    for _ in range(10):
        a = rng.dirichlet([1, 1])
        b = rng.dirichlet([1, 1])
        x = np.sort(rng.choice(G.nodes, 2, replace=False))
        y = np.sort(rng.choice(G.nodes, 2, replace=False))
        mu, nu = atomic(G, x, a), atomic(G, y, b)
        assert w_min(mu, nu)[0] <= _two_by_two_brute(a, b, x, y, "min") + 1e-12
        assert w_min(mu, nu)[0] >= _two_by_two_brute(a, b, x, y, "min") - 1e-6
        assert w_max(mu, nu)[0] == pytest.approx(_two_by_two_brute(a, b, x, y, "max"), abs=1e-6)


def test_quantile_matches_lp_oracles(rng):
    for _ in range(100):
        k1, k2 = rng.integers(1, 9, size=2)
        mu = make_measure(random_weights(rng, G.size, k1), G)
        nu = make_measure(random_weights(rng, G.size, k2), G)
        xs, ws = mu.atoms()
        ys, vs = nu.atoms()
        for sense, fn in (("min", w_min), ("max", w_max)):
            val, cp = fn(mu, nu)
            assert cp.marginal_error() <= 1e-10 and cp.plan.min() >= 0
            assert abs(val - lp_inner_product(xs, ws, ys, vs, sense)) <= 1e-9
            assert abs(val - lp_transport(mu, nu, sense)[0]) <= 1e-9


def test_vertex_enumeration_agrees(rng):
    for _ in range(20):
        k1, k2 = rng.integers(1, 5, size=2)
        mu = make_measure(random_weights(rng, G.size, k1), G)
        nu = make_measure(random_weights(rng, G.size, k2), G)
        for sense in ("min", "max"):
            assert enumerate_vertices(mu, nu, sense)[0] == pytest.approx(lp_transport(mu, nu, sense)[0], abs=1e-9)


@given(weights41, weights41)
def test_flip_identity(a, b):
    mu, nu = make_measure(a, G), make_measure(b, G)
    assert abs(w_min(mu, nu)[0] + w_max(flip(mu), nu)[0]) <= 1e-10


@given(weights41, weights41, weights41, st.sampled_from([0.25, 0.5, 0.75]))
def test_convexity_in_nu(a, b, c, lam):
    mu, n1, n2 = (make_measure(w, G) for w in (a, b, c))
    mix = make_measure(lam * n1.weights + (1 - lam) * n2.weights, G)
    assert w_min(mu, mix)[0] <= lam * w_min(mu, n1)[0] + (1 - lam) * w_min(mu, n2)[0] + 1e-9


@given(weights41, weights41, st.lists(st.floats(-4, 4), min_size=41, max_size=41))
def test_weak_duality(a, b, fv):
    mu, nu = make_measure(a, G), make_measure(b, G)
    f = GridFunction(G, np.array(fv))
    assert kantorovich_dual_value(f, mu, nu) <= w_min(mu, nu)[0] + 1e-9


def test_dual_attained_for_dirac(rng):
    nu = make_measure(random_weights(rng, G.size, 6), G)
    v0 = 0.6
    f = GridFunction(G, v0 * G.nodes)
    mu = dirac(G, v0)
    assert kantorovich_dual_value(f, mu, nu) == pytest.approx(v0 * nu.mean, abs=1e-14)
    assert kantorovich_dual_value(f, mu, nu, strict=True) == pytest.approx(w_min(mu, nu)[0], abs=1e-14)


def test_constant_potential_is_weak(rng):
    mu = make_measure(random_weights(rng, G.size, 4), G)
    nu = make_measure(random_weights(rng, G.size, 4), G)
    c = 1.3
    val = kantorovich_dual_value(GridFunction(G, np.full(G.size, c)), mu, nu)
    # f~(v) = min_x v x - c
    expected = c + mu.weights @ (np.minimum(mu.grid.nodes * G.x_min, mu.grid.nodes * G.x_max) - c)
    assert val == pytest.approx(expected, abs=1e-12)
    assert val <= w_min(mu, nu)[0] + 1e-9


def test_optimized_potential_recovers_w_min(rng):
    for _ in range(10):
        mu = make_measure(random_weights(rng, G.size, 5), G)
        nu = make_measure(random_weights(rng, G.size, 5), G)
        val, f = kantorovich_lp(mu, nu)
        assert abs(kantorovich_dual_value(f, mu, nu) - w_min(mu, nu)[0]) <= 1e-6
        assert abs(val - w_min(mu, nu)[0]) <= 1e-6


def test_strict_mode_rejects_flagged_mass():
    mu = atomic(G, [-1.0, 1.0], [0.5, 0.5])
    nu = gaussian(G, 0.0, 0.5)
    f = GridFunction(G, 0.3 * G.nodes)
    with pytest.raises(ValidationError):
        kantorovich_dual_value(f, mu, nu, strict=True)


def test_two_dimensional_lp():
    g2 = SpaceGrid(-1.0, 1.0, 3, dimension=2)
    a = np.zeros(9)
    a[[0, 8]] = 0.5
    b = np.zeros(9)
    b[[2, 6]] = 0.5
    mu, nu = make_measure(a, g2), make_measure(b, g2)
    best = min(sum(0.5 * (g2.points[i] @ g2.points[j]) for i, j in zip((0, 8), perm))
               for perm in itertools.permutations((2, 6)))
    assert w_min(mu, nu)[0] == pytest.approx(best, abs=1e-12)
