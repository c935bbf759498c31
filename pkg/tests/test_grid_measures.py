import numpy as np
import pytest
from hypothesis import given, strategies as st

from ballistic_ot import (AsymmetricGrid, GridMismatch, NegativeWeight, SpaceGrid, TimeGrid, ValidationError, ZeroMass,
                          atomic, dirac, flip, gaussian, make_measure, mollifier_kernel, mollify, moment, w1_metric)
from ballistic_ot.grid_measures import binned_measure
from oracles import lp_w1

GRID9 = SpaceGrid(-4.0, 4.0, 9)
SYM = SpaceGrid(-2.0, 2.0, 41)

weights9 = st.lists(st.floats(0.0, 10.0, allow_nan=False), min_size=9, max_size=9).filter(lambda w: sum(w) > 1e-3)
weights41 = st.lists(st.floats(0.0, 10.0, allow_nan=False), min_size=41, max_size=41).filter(lambda w: sum(w) > 1e-3)


def test_make_measure_uniform():
    g = SpaceGrid(0.0, 3.0, 4)
    np.testing.assert_allclose(make_measure([1, 1, 1, 1], g).weights, [0.25] * 4)


def test_make_measure_single_atom():
    g = SpaceGrid(-1.0, 1.0, 3)
    np.testing.assert_array_equal(make_measure([0, 2, 0], g).weights, [0, 1, 0])


def test_make_measure_rejections():
    g = SpaceGrid(-1.0, 1.0, 3)
    with pytest.raises(NegativeWeight):
        make_measure([1, -1, 1], g)
    with pytest.raises(ZeroMass):
        make_measure([0, 0, 0], g)
    with pytest.raises(GridMismatch):
        make_measure([1, 1], g)


@given(weights9)
def test_make_measure_normalizes(w):
    m = make_measure(w, GRID9)
    assert np.all(m.weights >= 0)
    assert abs(m.weights.sum() - 1) <= 1e-10


def test_moment_examples():
    g = SpaceGrid(-2.0, 2.0, 5)
    assert moment(dirac(g, 2.0), 1) == 2.0
    pm = atomic(g, [-1.0, 1.0], [0.5, 0.5])
    assert moment(pm, 1) == 0.0
    assert moment(pm, 2) == 1.0
    assert moment(atomic(g, [-2.0, 1.0], [0.5, 0.5]), 1, absolute=True) == 1.5
    with pytest.raises(ValidationError):
        moment(pm, 0)


def test_flip_examples():
    g = SpaceGrid(-1.0, 1.0, 3)
    assert flip(dirac(g, 1.0)) == dirac(g, -1.0)
    sym = make_measure([1, 2, 1], g)
    assert flip(sym) == sym
    with pytest.raises(AsymmetricGrid):
        flip(dirac(SpaceGrid(0.0, 1.0, 3), 0.0))


@given(weights41)
def test_flip_involution_and_even_moments(w):
    m = make_measure(w, SYM)
    f = flip(m)
    assert flip(f) == m
    np.testing.assert_array_equal(f.weights, m.weights[::-1])
    for k in (2, 4):
        # reversed summation order: compare within rounding
        assert abs(moment(f, k, absolute=True) - moment(m, k, absolute=True)) <= 1e-12
    assert abs(moment(f, 1) + moment(m, 1)) <= 1e-12


def test_mollify_dirac_bump():
    g = SpaceGrid(-1.0, 1.0, 65)
    out = mollify(dirac(g, 0.0), 2 * g.h)
    supp = out.support
    assert 3 <= supp.size <= 5
    np.testing.assert_allclose(out.weights, out.weights[::-1], atol=1e-15)
    assert abs(out.weights.sum() - 1) <= 1e-12
    assert g.nodes[supp].mean() == pytest.approx(0.0, abs=1e-12)


@given(weights41, st.floats(0.01, 0.099))
def test_mollify_subgrid_identity(w, eps):
    m = make_measure(w, SYM)
    assert eps < SYM.h
    assert mollify(m, eps) == m


@given(st.lists(st.floats(0.0, 5.0, allow_nan=False), min_size=21, max_size=21).filter(lambda w: sum(w) > 1e-3),
       st.floats(0.05, 0.9))
def test_mollify_mass_and_mean(w, eps):
    # support kept at least eps from the boundary
    raw = np.zeros(SYM.size)
    raw[10:31] = w
    m = make_measure(raw, SYM)
    out = mollify(m, eps)
    assert abs(out.weights.sum() - 1) <= 1e-12
    assert abs(out.mean - m.mean) <= 1e-10


def test_mollify_clamps_boundary_mass():
    g = SpaceGrid(-1.0, 1.0, 21)
    out = mollify(dirac(g, 1.0), 0.3)
    assert abs(out.weights.sum() - 1) <= 1e-12
    assert out.weights[-1] > 0.4


def test_mollifier_kernel_moments():
    k = mollifier_kernel(0.1, 0.5)
    j = np.arange(-(k.size // 2), k.size // 2 + 1)
    assert abs(k.sum() - 1) < 1e-15
    assert abs(k @ j) < 1e-15
    np.testing.assert_array_equal(mollifier_kernel(0.1, 0.05), [1.0])


def test_w1_examples():
    g = SpaceGrid(-2.0, 2.0, 5)
    m = gaussian(g, 0.0, 1.0)
    assert w1_metric(m, m) == 0.0
    assert w1_metric(dirac(g, 0.0), dirac(g, 1.0)) == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(GridMismatch):
        w1_metric(dirac(g, 0.0), dirac(SpaceGrid(-2.0, 2.0, 9), 0.0))


def test_w1_matches_lp(rng):
    g = SpaceGrid(-3.0, 3.0, 25)
    for _ in range(40):
        k1, k2 = rng.integers(1, 7, size=2)
        a = np.zeros(g.size)
        a[rng.choice(g.size, k1, replace=False)] = rng.uniform(0.1, 1, k1)
        b = np.zeros(g.size)
        b[rng.choice(g.size, k2, replace=False)] = rng.uniform(0.1, 1, k2)
        m1, m2 = make_measure(a, g), make_measure(b, g)
        x1, w1 = m1.atoms()
        x2, w2 = m2.atoms()
        assert abs(w1_metric(m1, m2) - lp_w1(x1, w1, x2, w2)) <= 1e-9


@given(weights9, weights9, weights9)
def test_w1_metric_axioms(a, b, c):
    ma, mb, mc = (make_measure(w, GRID9) for w in (a, b, c))
    assert abs(w1_metric(ma, mb) - w1_metric(mb, ma)) <= 1e-9
    assert w1_metric(ma, mc) <= w1_metric(ma, mb) + w1_metric(mb, mc) + 1e-9


def test_grid_helpers():
    g = SpaceGrid.from_spacing(-4.0, 4.0, 1 / 64)
    assert g.n_nodes == 513 and g.is_symmetric
    assert g.index_of(0.5) == 288
    with pytest.raises(ValidationError):
        SpaceGrid(1.0, 0.0, 5)
    tg = TimeGrid.with_max_dt(1.0, 0.3, multiple_of=2)
    assert tg.n_steps == 4 and tg.dt <= 0.3


def test_binned_measure_keeps_mean():
    g = SpaceGrid(-2.0, 2.0, 17)
    s = np.array([-0.3, 0.1, 0.77, 1.2])
    assert binned_measure(s, g).mean == pytest.approx(s.mean(), abs=1e-14)
