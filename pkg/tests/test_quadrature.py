import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bubbling.bubble_core import bubble_radial, dim_constants
from bubbling.errors import BubblingError, DivergentIntegralError
from bubbling.quadrature import (MomentSpec, axis_moment, flatness_constant, flatness_integral_tau,
                                 flatness_integral_tau_mc, gregory_weights, grid_lq_norm,
                                 line_moment, radial_moment, radial_product_weights)
from bubbling.radial_reduction import build_grid


# Oracles use only the standard library (math.gamma) and mpmath.

def beta_fn(x, y):
    return math.exp(math.lgamma(x) + math.lgamma(y) - math.lgamma(x + y))


def area(n):
    return 2.0 * math.pi ** (n / 2) / math.gamma(n / 2)


def moment_oracle(n, s, q):
    return 0.5 * area(n) * beta_fn((n + s) / 2, q - (n + s) / 2)


def axis_oracle(n, k):
    """int |y_1|^k (1+|y|^2)^{-n}: transverse Gaussian-type integral times a 1-D Beta."""
    return math.pi ** ((n - 1) / 2) * math.gamma((k + 1) / 2) * math.gamma((n - k) / 2) / math.gamma(n)


def shifted_axis_oracle(n, k, c):
    mpmath.mp.dps = 30
    f = lambda t: abs(t + c) ** k * (1 + t * t) ** (-(n + 1) / mpmath.mpf(2))
    breaks = sorted({0.0, -c})
    line = mpmath.quad(f, [-mpmath.inf, *breaks, mpmath.inf])
    return float(math.pi ** ((n - 1) / 2) * math.gamma((n + 1) / 2) / math.gamma(n)) * float(line)


# ---------------------------------------------------------------------------
# radial moments

def test_radial_moment_examples():
    assert radial_moment(n=3, s=0, q=3) == pytest.approx(math.pi ** 2 / 4, rel=1e-12)
    assert radial_moment(n=3, s=2, q=3) == pytest.approx(3 * math.pi ** 2 / 4, rel=1e-12)
    assert radial_moment(MomentSpec(3, 0, 3)) == pytest.approx(2.467401, abs=1e-6)
    assert radial_moment(n=3, s=2, q=3) == pytest.approx(7.402203, abs=1e-6)


def test_radial_moment_divergent():
    with pytest.raises(DivergentIntegralError):
        radial_moment(n=3, s=4, q=3)
    with pytest.raises(DivergentIntegralError):
        MomentSpec(5, 1.0, 3.0)


SPECS = [(n, s, q) for n in (1, 2, 3, 4, 5, 7, 10, 12) for s in (0.0, 0.5, 2.0, 3.3)
         for q in (n / 2 + s / 2 + 0.6, float(n), n + 2.5) if 2 * q > n + s]


@pytest.mark.parametrize("n,s,q", SPECS[:60])
def test_radial_moment_beta_identity(n, s, q):
    assert radial_moment(n=n, s=s, q=q) == pytest.approx(moment_oracle(n, s, q), rel=1e-10)


def test_radial_moment_spec_count():
    assert len(SPECS[:60]) >= 50


# ---------------------------------------------------------------------------
# flatness constants

def test_flatness_constant_examples():
    assert flatness_constant(3, 2.0, 0) == pytest.approx(math.pi ** 2 / 4, rel=1e-12)
    assert flatness_constant(3, 2.0, 0) == pytest.approx(radial_moment(n=3, s=2, q=3) / 3, rel=1e-12)
    assert flatness_constant(5, 2.0, 0) == pytest.approx(math.pi ** 3 / 96, rel=1e-12)
    assert flatness_constant(5, 2.0, 0) == pytest.approx(0.322982, abs=1e-6)


@pytest.mark.parametrize("n,gamma,shift", [(n, g, sh) for n in (3, 4, 5, 6, 8, 10, 12)
                                           for g in (2.0, 2.25, 2.5, 3.0) for sh in (0, 2) if g < n])
def test_flatness_constant_beta_identity(n, gamma, shift):
    assert flatness_constant(n, gamma, shift) == pytest.approx(axis_oracle(n, gamma - shift), rel=1e-10)


def test_flatness_constant_axis_independence():
    assert abs(flatness_constant(6, 2.5, 0, axis=0) - flatness_constant(6, 2.5, 0, axis=1)) < 1e-12


def test_flatness_constant_errors():
    with pytest.raises(DivergentIntegralError):
        flatness_constant(3, 3.0, 0)
    with pytest.raises(BubblingError):
        flatness_constant(5, 1.5, 0)
    with pytest.raises(BubblingError):
        flatness_constant(5, 2.0, 1)
    with pytest.raises(BubblingError):
        flatness_constant(5, 2.0, 0, axis=5)


# ---------------------------------------------------------------------------
# tau-dependent flatness integrals

def test_flatness_integral_centered():
    a = np.array([1.0, 2.0, -0.5, 0.25, 3.0])
    got = flatness_integral_tau(5, 2.5, tuple(a), (0.0,) * 5)
    assert got == pytest.approx(flatness_constant(5, 2.5) * a.sum(), rel=1e-12)


def test_flatness_integral_shift_example():
    assert flatness_integral_tau(3, 2.0, (1, 1, 1), (1, 0, 0)) == pytest.approx(math.pi ** 2, rel=1e-12)
    assert flatness_integral_tau(3, 2.0, (1, 1, 1), (1, 0, 0)) == pytest.approx(9.869604, abs=1e-6)


@pytest.mark.parametrize("n,k,c", [(5, 2.5, 0.3), (5, 2.5, -1.7), (6, 3.0, 2.2), (10, 2.25, 0.9),
                                   (4, 2.0, 5.0), (7, 3.5, 0.01)])
def test_axis_moment_against_mpmath(n, k, c):
    assert axis_moment(n, k, c) == pytest.approx(shifted_axis_oracle(n, k, c), rel=1e-10)


def test_odd_line_moment_against_mpmath():
    mpmath.mp.dps = 30
    k, m, c = 1.5, 3.0, 0.7
    f = lambda t: mpmath.sign(t + c) * abs(t + c) ** k * (1 + t * t) ** (-m)
    ref = float(mpmath.quad(f, [-mpmath.inf, -c, 0.0, mpmath.inf]))
    assert line_moment(k, m, c, odd=True) == pytest.approx(ref, rel=1e-10)


@pytest.mark.parametrize("n,gamma,tau", [(3, 2.0, (0.5, -0.2, 0.0)), (5, 2.5, (0.3, 0.0, -1.0, 0.2, 0.7))])
def test_flatness_integral_monte_carlo(n, gamma, tau):
    a = tuple(np.linspace(0.5, 1.5, n))
    val = flatness_integral_tau(n, gamma, a, tau)
    est, se = flatness_integral_tau_mc(n, gamma, a, tau, samples=1_000_000, seed=0)
    assert abs(est - val) < 4 * se


def test_flatness_integral_shape_errors():
    with pytest.raises(BubblingError):
        flatness_integral_tau(3, 2.0, (1, 1), (0, 0, 0))
    with pytest.raises(DivergentIntegralError):
        flatness_integral_tau(3, 3.5, (1, 1, 1), (0, 0, 0))


@settings(max_examples=25, deadline=None)
@given(st.floats(-3, 3), st.sampled_from([2.0, 2.5, 3.0]))
def test_flatness_integral_even(t, gamma):
    a = (1.0, 0.5, 2.0, 1.0)
    v1 = flatness_integral_tau(4 if gamma < 4 else 5, gamma, a, (t, 0.3, 0.0, -0.1))
    v2 = flatness_integral_tau(4 if gamma < 4 else 5, gamma, a, (-t, -0.3, 0.0, 0.1))
    assert v1 == pytest.approx(v2, rel=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.01, 100.0), st.floats(-2, 2))
def test_flatness_integral_homogeneous(s, t):
    a = np.array([1.0, -0.3, 0.8])
    tau = (t, 0.1, 0.0)
    base = flatness_integral_tau(3, 2.5, tuple(a), tau)
    assert flatness_integral_tau(3, 2.5, tuple(s * a), tau) == pytest.approx(s * base, rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(0.05, 0.95), st.sampled_from([2.0, 2.25, 3.0]))
def test_flatness_integral_convex_min_at_zero(x, y, w, gamma):
    n = 5
    f = lambda c: flatness_integral_tau(n, gamma, (1.0,) * n, (c, 0, 0, 0, 0))
    mid = w * x + (1 - w) * y
    assert f(mid) <= w * f(x) + (1 - w) * f(y) + 1e-12 * (1 + abs(f(x)) + abs(f(y)))
    assert f(0.0) <= f(x) + 1e-14


# ---------------------------------------------------------------------------
# Gregory weights and grid norms

@pytest.mark.parametrize("stencil", [2, 4, 6])
def test_product_weights_polynomial_exactness(stencil):
    r = np.sort(np.random.default_rng(stencil).uniform(0.0, 3.0, 40))
    r[0] = 0.0
    w = radial_product_weights(r, 5, stencil)
    for deg in range(stencil):
        exact = r[-1] ** (deg + 5) / (deg + 5)
        assert np.dot(w, r ** deg) == pytest.approx(exact, rel=1e-12)


def test_grid_weights_resolve_the_bubble():
    n = 5
    g = build_grid(1e4, 1e-3, n)
    U = bubble_radial(g.nodes / 1e-3, n) * (1e-3) ** (-(n - 2) / 2)
    # int U^{p+1} r^{n-1} dr over a ball of radius 1e7 mu, tail below 1e-30
    val = np.dot(g.quadrature_weights(), U ** (2 * n / (n - 2)))
    oracle = dim_constants(n).alpha_n ** (2 * n / (n - 2)) * moment_oracle(n, 0, n) / area(n)
    assert val == pytest.approx(oracle, rel=1e-9)


@pytest.mark.parametrize("order", [1, 2, 3, 4, 5])
def test_gregory_polynomial_exactness(order):
    m = 23
    w = gregory_weights(m, order)
    x = np.arange(m, dtype=float)
    for deg in range(order + 1):
        exact = (m - 1) ** (deg + 1) / (deg + 1)
        assert np.dot(w, x ** deg) == pytest.approx(exact, rel=1e-12)


def test_gregory_needs_two_nodes():
    with pytest.raises(BubblingError):
        gregory_weights(1)


@pytest.mark.parametrize("n,q", [(3, 2.0), (5, 10 / 7), (10, 5 / 3)])
def test_grid_norm_constant_field(n, q):
    R = 2.0
    g = build_grid(R, 0.01, n)
    c = 0.7
    expect = c * (area(n) * R ** n / n) ** (1 / q)
    assert grid_lq_norm(np.full(g.size, c), q, n, g) == pytest.approx(expect, rel=1e-10)


def test_grid_norm_bubble_energy_n3():
    g = build_grid(1e5, 1.0, 3, 48)
    U = bubble_radial(g.nodes, 3)
    val = grid_lq_norm(U, 6.0, 3, g) ** 6
    # U^6 = 3^{3/2} (1+r^2)^{-3}
    oracle = 3 ** 1.5 * moment_oracle(3, 0, 3)
    assert oracle == pytest.approx(3 ** 1.5 * math.pi ** 2 / 4, rel=1e-14)
    assert val == pytest.approx(oracle, rel=1e-9)


def test_grid_norm_refinement():
    g = build_grid(50.0, 1.0, 5, 24)
    f = lambda r: np.exp(-r * r) * (1 + r)
    a = grid_lq_norm(f(g.nodes), 10 / 7, 5, g)
    g2 = g.refine()
    b = grid_lq_norm(f(g2.nodes), 10 / 7, 5, g2)
    assert abs(a - b) < 1e-8 * abs(b)


def test_grid_norm_errors():
    g = build_grid(1.0, 0.1, 3)
    with pytest.raises(BubblingError):
        grid_lq_norm(np.array([]), 2.0, 3, np.array([]))
    with pytest.raises(BubblingError):
        grid_lq_norm(np.ones(g.size), 0.5, 3, g)


def test_grid_norm_plain_radii_fallback():
    r = np.linspace(0, 1, 2001)
    # int_0^1 r^2 dr * 4 pi = 4 pi / 3 in 3-D
    assert grid_lq_norm(np.ones_like(r), 1.0, 3, r) == pytest.approx(4 * math.pi / 3, rel=1e-6)
