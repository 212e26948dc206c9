import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.polynomial import polynomial as P

from mfggp.functionals import (
    PointDeriv,
    PointEval,
    WeightedSum,
    apply,
    atoms,
    gauss_legendre_rule,
    nonlocal_coupling_functional,
    nonlocal_weights,
)
from mfggp.kernels import LAP, partial, second

# Gaussian convolution of m == 1 at the centre of the unit square, sigma = 0.5,
# from a 400 x 400 midpoint rule computed offline.
MIDPOINT_ORACLE = 0.732094181174508


def test_point_eval():
    assert apply(PointEval(0.3), lambda x: x[0] ** 2) == pytest.approx(0.09, abs=1e-15)


def test_point_second_derivative():
    f = PointDeriv(0.3, second(0, 0))
    assert apply(f, lambda x: x[0] ** 2, {second(0, 0): lambda x: 2.0}) == 2.0


def test_laplacian_falls_back_to_second_partials():
    f = PointDeriv([0.1, 0.2], LAP)
    d = {second(0, 0): lambda x: 2.0, second(1, 1): lambda x: 6 * x[1]}
    assert apply(f, lambda x: 0.0, d) == pytest.approx(2.0 + 1.2)


def test_missing_derivative_raises():
    with pytest.raises(KeyError):
        apply(PointDeriv(0.3, partial(0)), lambda x: x[0])


def test_weighted_sum_of_constant():
    rule = gauss_legendre_rule(5, [(0.0, 1.0)])
    ws = WeightedSum([(w, PointEval(y)) for w, y in zip(rule.weights, rule.nodes)])
    assert apply(ws, lambda x: 1.0) == pytest.approx(1.0, abs=1e-14)
    assert len(atoms(ws)) == 5


def test_weighted_sum_rejects_nonfinite():
    with pytest.raises(ValueError):
        WeightedSum([(np.inf, PointEval(0.0))])


def test_two_point_rule():
    rule = gauss_legendre_rule(2, [(-1.0, 1.0)])
    np.testing.assert_allclose(np.sort(rule.nodes[:, 0]), [-1 / np.sqrt(3), 1 / np.sqrt(3)], rtol=1e-15)
    np.testing.assert_allclose(rule.weights, [1.0, 1.0], rtol=1e-15)
    assert rule.integrate(rule.nodes[:, 0] ** 2) == pytest.approx(2 / 3, abs=1e-15)


def test_900_node_rule():
    rule = gauss_legendre_rule(30, [(0.0, 1.0), (0.0, 1.0)])
    assert len(rule) == 900
    assert abs(rule.weights.sum() - 1.0) <= 1e-12
    assert np.all(rule.weights > 0)


def test_empty_box_raises():
    with pytest.raises(ValueError):
        gauss_legendre_rule(3, [(0.0, 0.0)])
    with pytest.raises(ValueError):
        gauss_legendre_rule(3, [])
    with pytest.raises(ValueError):
        gauss_legendre_rule(0, [(0.0, 1.0)])


def test_weights_sum_to_volume():
    box = [(-0.5, 0.5), (0.0, 2.0), (1.0, 1.5)]
    rule = gauss_legendre_rule(4, box)
    assert abs(rule.weights.sum() - 1.0) <= 1e-12


@given(
    st.integers(1, 8),
    st.lists(st.floats(-3, 3), min_size=16, max_size=16),
    st.floats(-2, 0),
    st.floats(0.1, 3),
)
def test_gauss_legendre_exactness_2d(n, coeffs, lo, width):
    deg = 2 * n - 1
    c = np.zeros((deg + 1, deg + 1))
    flat = np.array(coeffs)
    c[: min(deg + 1, 4), : min(deg + 1, 4)] = flat.reshape(4, 4)[: deg + 1, : deg + 1]
    # top-degree terms in both variables so exactness is really exercised
    c[deg, deg] = 1.0
    box = [(lo, lo + width), (lo, lo + 0.5 * width)]
    rule = gauss_legendre_rule(n, box)
    vals = P.polyval2d(rule.nodes[:, 0], rule.nodes[:, 1], c)
    ci = P.polyint(P.polyint(c, axis=0), axis=1)
    (a0, b0), (a1, b1) = box
    exact = P.polyval2d(b0, b1, ci) - P.polyval2d(a0, b1, ci) - P.polyval2d(b0, a1, ci) + P.polyval2d(a0, a1, ci)
    assert abs(rule.integrate(vals) - exact) <= 1e-10 * max(1.0, abs(exact))


@given(
    st.lists(st.floats(-5, 5), min_size=4, max_size=4),
    st.floats(-3, 3),
    st.floats(-3, 3),
    st.floats(-1, 1),
)
def test_apply_is_linear(cs, a, b, x0):
    g = lambda x: cs[0] + cs[1] * x[0] ** 3
    h = lambda x: cs[2] * x[0] + cs[3] * x[0] ** 2
    dg = {partial(0): lambda x: 3 * cs[1] * x[0] ** 2}
    dh = {partial(0): lambda x: cs[2] + 2 * cs[3] * x[0]}
    comb = lambda x: a * g(x) + b * h(x)
    dcomb = {partial(0): lambda x: a * dg[partial(0)](x) + b * dh[partial(0)](x)}
    funcs = [
        PointEval(x0),
        PointDeriv(x0, partial(0)),
        WeightedSum([(0.3, PointEval(x0)), (-1.7, PointEval(x0 + 0.2))]),
    ]
    for f in funcs:
        lhs = apply(f, comb, dcomb)
        rhs = a * apply(f, g, dg) + b * apply(f, h, dh)
        assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs))


UNIT_SQUARE = [(0.0, 1.0), (0.0, 1.0)]


def test_nonlocal_linearity():
    rule = gauss_legendre_rule(10, UNIT_SQUARE)
    f = nonlocal_coupling_functional(0.5, rule, [0.3, 0.7])
    one = apply(f, lambda x: 1.0)
    assert apply(f, lambda x: 2.0) == 2 * one


def test_nonlocal_wide_gaussian_is_mass():
    rule = gauss_legendre_rule(10, UNIT_SQUARE)
    f = nonlocal_coupling_functional(1e6, rule, [0.5, 0.5])
    assert abs(apply(f, lambda x: 1.0) - 1.0) <= 1e-6


def test_nonlocal_against_midpoint_oracle():
    rule = gauss_legendre_rule(30, UNIT_SQUARE)
    f = nonlocal_coupling_functional(0.5, rule, [0.5, 0.5])
    assert abs(apply(f, lambda x: 1.0) - MIDPOINT_ORACLE) <= 1e-4


def test_nonlocal_rejects_bad_sigma():
    rule = gauss_legendre_rule(3, UNIT_SQUARE)
    with pytest.raises(ValueError):
        nonlocal_coupling_functional(0.0, rule, [0.5, 0.5])


@given(st.floats(0.01, 10.0), st.floats(0, 1), st.floats(0, 1), st.booleans())
def test_nonlocal_weights_positive_and_bounded(sigma, x, y, periodic):
    rule = gauss_legendre_rule(6, UNIT_SQUARE)
    w = nonlocal_weights([[x, y]], rule, sigma, (1.0, 1.0) if periodic else None)[0]
    assert np.all(w >= 0)
    assert np.all(w <= rule.weights)
    if sigma > 0.2:
        assert np.all(w > 0)


def test_periodic_distance_uses_minimum_image():
    rule = gauss_legendre_rule(4, UNIT_SQUARE)
    a = nonlocal_weights([[0.02, 0.5]], rule, 0.3, (1.0, 1.0))
    b = nonlocal_weights([[1.02, 0.5]], rule, 0.3, (1.0, 1.0))
    np.testing.assert_allclose(a, b, rtol=1e-13)
    c = nonlocal_weights([[1.02, 0.5]], rule, 0.3)
    assert not np.allclose(a, c)


def test_midpoint_oracle_is_reproducible():
    n = 400
    t = (np.arange(n) + 0.5) / n
    gx, gy = np.meshgrid(t, t, indexing="ij")
    val = np.exp(-((gx - 0.5) ** 2 + (gy - 0.5) ** 2) / (2 * 0.25)).sum() / n**2
    assert val == pytest.approx(MIDPOINT_ORACLE, abs=1e-14)
