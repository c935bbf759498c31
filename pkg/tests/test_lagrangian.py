import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.optimize import isotonic_regression

from ballistic_ot import (GridFunction, HamiltonianModel, LagrangianModel, SamplingConfig, SpaceGrid,
                          VelocityOutOfRange, check_assumptions, concave_hull, convex_hull, eval_H, eval_L, grad_p_H,
                          legendre_concave, legendre_convex)
from ballistic_ot.lagrangian import convex_conjugate_points, isotonic_increasing
from oracles import brute_concave_hull, brute_convex_conjugate

G = SpaceGrid(-4.0, 4.0, 33)
DUAL = SpaceGrid(-6.0, 6.0, 49)
values33 = st.lists(st.floats(-5.0, 5.0, allow_nan=False), min_size=33, max_size=33).map(np.array)


def test_eval_L_examples():
    q = LagrangianModel.quadratic(G)
    assert eval_L(q, 0.0, 0.0, 2.0) == 2.0
    one = LagrangianModel.quadratic(G, potential=lambda t, x: np.ones_like(x))
    assert eval_L(one, 0.3, 1.0, 0.0) == 1.0
    with pytest.raises(VelocityOutOfRange):
        eval_L(q, 0.0, 0.0, q.v_max * 1.01)


def test_default_v_max():
    assert LagrangianModel.quadratic(G, 2.0).v_max == pytest.approx(8 * 4.0 / 2.0)


def test_tabulated_lookup():
    xs = np.linspace(-4, 4, 9)
    vs = np.linspace(-3, 3, 13)
    func = lambda t, x, v: 0.5 * v ** 2 + 0.1 * x ** 2 + 0 * t  # noqa: E731
    m = LagrangianModel.tabulate(func, xs, vs)
    for x in xs[::3]:
        for v in vs[::4]:
            assert eval_L(m, 0.0, x, v) == pytest.approx(func(0, x, v), abs=1e-12)


def test_eval_H_examples():
    q = HamiltonianModel(LagrangianModel.quadratic(G))
    assert eval_H(q, 0.0, 0.0, 3.0) == 4.5
    c = HamiltonianModel(LagrangianModel.quadratic(G, potential=lambda t, x: 0.7 + 0 * x))
    assert eval_H(c, 0.5, 1.0, 2.0) == pytest.approx(2.0 - 0.7)
    assert eval_H(q, 0.2, 1.0, 0.0) == 0.0


def test_discrete_sup_matches_closed_form(rng):
    pot = lambda t, x: 1 + np.sin(x) ** 2 + 0 * t  # noqa: E731
    model = LagrangianModel.quadratic(G, potential=pot)
    closed = HamiltonianModel(model, "closed_form")
    disc = HamiltonianModel(model, "discrete_sup")
    t = rng.uniform(0, 1, 200)
    x = rng.uniform(-4, 4, 200)
    p = rng.uniform(-10, 10, 200)
    np.testing.assert_allclose(eval_H(disc, t, x, p), eval_H(closed, t, x, p), atol=1e-3)
    # H(t, x, 0) = -inf_v L
    np.testing.assert_allclose(eval_H(disc, t, x, 0 * p), -pot(t, x), atol=1e-12)


def test_fenchel_inequality_on_v_grid(rng):
    model = LagrangianModel.quadratic(G, potential=lambda t, x: np.cos(x) ** 2)
    ham = HamiltonianModel(model, "discrete_sup", n_v=801)
    v = ham.v_grid[::7]
    for _ in range(20):
        t, x, p = rng.uniform(0, 1), rng.uniform(-4, 4), rng.uniform(-20, 20)
        assert np.all(eval_H(ham, t, x, p) >= p * v - eval_L(model, t, x, v) - 1e-12)


def test_grad_p_H_examples(rng):
    q = HamiltonianModel(LagrangianModel.quadratic(G))
    assert grad_p_H(q, 0.0, 0.0, 1.5) == 1.5
    assert grad_p_H(q, 0.0, 0.0, 0.0) == 0.0
    model = LagrangianModel.quadratic(G, potential=lambda t, x: 0.3 * x ** 2)
    disc = HamiltonianModel(model, "discrete_sup", n_v=1601)
    dv = disc.v_grid[1] - disc.v_grid[0]
    for _ in range(50):
        t, x, p = rng.uniform(0, 1), rng.uniform(-4, 4), rng.uniform(-20, 20)
        fd = (eval_H(disc, t, x, p + dv) - eval_H(disc, t, x, p - dv)) / (2 * dv)
        assert abs(grad_p_H(disc, t, x, p) - fd) <= 2 * dv
    # ties go to the smaller |v|
    assert grad_p_H(disc, 0.0, 0.0, 0.0) == 0.0


def test_legendre_quadratic_self_dual():
    f = GridFunction(G, 0.5 * G.nodes ** 2)
    inner = np.abs(DUAL.nodes) <= 3.5
    star = legendre_convex(f, DUAL)
    np.testing.assert_allclose(star.values[inner], 0.5 * DUAL.nodes[inner] ** 2, atol=G.h ** 2)
    tilde = legendre_concave(GridFunction(G, -0.5 * G.nodes ** 2), DUAL)
    np.testing.assert_allclose(tilde.values[inner], -0.5 * DUAL.nodes[inner] ** 2, atol=G.h ** 2)


@pytest.mark.parametrize("u", [-1.0, 0.0, 0.5, 2.0])
def test_legendre_of_linear_is_indicator_surrogate(u):
    # sup_z <v - u, z> is the indicator of {u}; on the grid it is R|v - u| and flagged off u
    f = GridFunction(G, u * G.nodes)
    v = np.array([u - 1.0, u - 0.25, u, u + 0.25, u + 1.0])
    star = legendre_convex(f, v)
    assert star.values[2] == 0.0 and not star.flags[2]
    assert np.all(star.flags[[0, 1, 3, 4]]) and np.all(np.isinf(star.values[[0, 1, 3, 4]]))
    np.testing.assert_allclose(star.truncated, G.radius * np.abs(v - u), atol=1e-12)
    tilde = legendre_concave(f, v)
    assert tilde.values[2] == 0.0


def test_legendre_brute_force_exact(rng):
    for _ in range(200):
        n = rng.integers(2, 40)
        x = np.sort(rng.choice(np.linspace(-5, 5, 201), n, replace=False))
        y = rng.normal(size=n) * rng.uniform(0.1, 5)
        v = rng.uniform(-30, 30, 60)
        vals, idx, _ = convex_conjugate_points(x, y, v)
        ref, ref_idx = brute_convex_conjugate(x, y, v)
        np.testing.assert_array_equal(vals, ref)
        np.testing.assert_array_equal(idx, ref_idx)


@given(values33)
def test_legendre_concave_identity(y):
    f = GridFunction(G, y)
    tilde = legendre_concave(f, DUAL)
    neg = legendre_convex(GridFunction(G, -y), -DUAL.nodes)
    np.testing.assert_array_equal(tilde.truncated, -neg.truncated)
    np.testing.assert_array_equal(tilde.flags, neg.flags)


@given(values33)
def test_transform_shapes(y):
    star = legendre_convex(GridFunction(G, y), DUAL).truncated
    assert np.all(np.diff(star, 2) >= -1e-9)
    tilde = legendre_concave(GridFunction(G, y), DUAL).truncated
    assert np.all(np.diff(tilde, 2) <= 1e-9)


@given(values33, st.lists(st.floats(-20, 20), min_size=20, max_size=20))
def test_fenchel_young(y, v):
    v = np.array(v)
    vals, idx, _ = convex_conjugate_points(G.nodes, y, v)
    gap = y[:, None] + vals[None, :] - G.nodes[:, None] * v[None, :]
    assert gap.min() >= -1e-9
    np.testing.assert_allclose(y[idx] + vals - G.nodes[idx] * v, 0.0, atol=1e-9)


def _pair_slopes(x, y):
    i, j = np.triu_indices(x.size, 1)
    return np.unique((y[j] - y[i]) / (x[j] - x[i]))


@given(values33)
def test_double_transform_is_hull(y):
    x = G.nodes
    v = _pair_slopes(x, y)
    star = legendre_convex(GridFunction(G, y), v)
    ok = ~star.flags
    back, _, _ = convex_conjugate_points(v[ok], star.values[ok], x)
    np.testing.assert_allclose(back, convex_hull(GridFunction(G, y)).values, atol=1e-9)
    # concave: f~~ = concave hull
    tilde = legendre_concave(GridFunction(G, y), v)
    ok = ~tilde.flags
    back, _, _ = convex_conjugate_points(v[ok], -tilde.values[ok], -x)
    np.testing.assert_allclose(-back, concave_hull(GridFunction(G, y)).values, atol=1e-9)


@given(values33, st.lists(st.floats(0.0, 3.0), min_size=33, max_size=33))
def test_order_reversal(y, d):
    f = GridFunction(G, y)
    g = GridFunction(G, y + np.array(d))
    assert np.all(legendre_convex(f, DUAL).truncated >= legendre_convex(g, DUAL).truncated - 1e-12)


def test_empty_domain_all_flagged():
    f = GridFunction(G, np.full(G.size, np.inf), np.ones(G.size, bool))
    out = legendre_convex(f, DUAL)
    assert out.flags.all()


def test_concave_hull_examples(rng):
    x = G.nodes
    conc = GridFunction(G, -x ** 2 + 0.3 * x)
    np.testing.assert_array_equal(concave_hull(conc).values, conc.values)
    dent = np.ones(G.size)
    dent[16] = 0.0
    np.testing.assert_allclose(concave_hull(GridFunction(G, dent)).values, np.ones(G.size))
    small = SpaceGrid(-1.0, 1.0, 13)
    for _ in range(30):
        y = rng.normal(size=13)
        np.testing.assert_allclose(concave_hull(GridFunction(small, y)).values,
                                   brute_concave_hull(small.nodes, y), atol=1e-12)


def test_isotonic_matches_scipy(rng):
    for _ in range(100):
        n = rng.integers(1, 60)
        y = rng.normal(size=n)
        w = rng.uniform(0.1, 2.0, n)
        ref = isotonic_regression(y, weights=w, increasing=True).x
        np.testing.assert_allclose(isotonic_increasing(y, w), ref, atol=1e-12)


def test_check_assumptions_quadratic():
    rep = check_assumptions(LagrangianModel.quadratic(G))
    assert rep.passed
    assert rep.delta == pytest.approx(2.0, abs=1e-6)
    assert rep.U == 0.0 and rep.alpha <= 0.5 + 1e-12
    assert rep.lower_bound_margin >= -1e-12


def test_check_assumptions_periodic_potential_modulus():
    model = LagrangianModel.quadratic(G, potential=lambda t, x: 1 + np.sin(x) ** 2)
    rep = check_assumptions(model, SamplingConfig(n_x=65))
    eps = sorted(rep.a2_modulus, reverse=True)
    mods = [rep.a2_modulus[e] for e in eps]
    assert all(b <= a + 1e-12 for a, b in zip(mods, mods[1:]))
    assert mods[-1] < 0.01 and rep.a2_ok
    assert rep.passed


def test_check_assumptions_flags_linear_growth():
    xs = np.linspace(-4, 4, 9)
    vs = np.linspace(-8, 8, 161)
    model = LagrangianModel.tabulate(lambda t, x, v: np.abs(v) + 0 * x, xs, vs)
    rep = check_assumptions(model)
    assert not rep.a1_ok
    assert any(msg.startswith("A1") for msg in rep.violations)
    assert rep.delta == pytest.approx(1.0, abs=1e-6)


def test_check_assumptions_exponent_ignores_potential_floor():
    xs = np.linspace(-4, 4, 17)
    vs = np.linspace(-8, 8, 161)
    model = LagrangianModel.tabulate(lambda t, x, v: 0.5 * np.abs(v) ** 1.5 + 1 + np.sin(x) ** 2, xs, vs,
                                     delta=1.5, alpha=0.5)
    rep = check_assumptions(model)
    assert rep.delta == pytest.approx(1.5, abs=1e-3)
    assert rep.a1_ok and rep.declared_bound_ok
