import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bubbling.bubble_core import (CurvatureData, CutoffSpec, dim_constants,
                                  kernel_z0_radial, sphere_area)
from bubbling.errors import BubblingError, DimensionError
from bubbling.radial_reduction import (BorderedSolver, ModelProblem, assemble_error_field,
                                       build_grid, bubble_sector_operator, correction_V_solve,
                                       error_scaling_sweep, h1_norm, kernel_eigen_counts,
                                       kernel_profile, kernel_residual, linear_stability_constant,
                                       nonlinear_reduction_solve, projected_linear_solve,
                                       reduced_energy_numeric, smooth_test_load, u0_solve_and_eigen)
from bubbling.reduced_energy import (expansion_constants, reduced_energy_expansion,
                                     theta_critical_point, theta_spec_for)
from bubbling.regimes import FlatnessProfile, GeometryData, classify_regime, mu_value


def n5_setup(ppd=24, **kw):
    geo = GeometryData(n=5, R_g=-1.0, u0_at_xi=1.0)
    prof = FlatnessProfile.from_alpha(0, [1.0] * 5)
    model = ModelProblem(geometry=geo, profile=prof, panels_per_decade=ppd, **kw)
    return model, classify_regime(geo, prof)


def trivial_setup():
    # R_g = 0, h = 0, u0 = 0 and no cutoff: the bubble solves the equation exactly
    geo = GeometryData(n=5, R_g=0.0, u0_at_xi=1.0)
    prof = FlatnessProfile.from_alpha(0, [1.0] * 5)
    model = ModelProblem(geometry=geo, profile=prof, cutoff=CutoffSpec(r=math.inf), h_scale=0.0)
    return model, classify_regime(geo, prof)


@pytest.fixture(scope="module")
def n5():
    return n5_setup()


@pytest.fixture(scope="module")
def n5_state(n5):
    model, sel = n5
    return nonlinear_reduction_solve(model, sel, 1.0, 1e-2)


def _t0(model, sel, lam):
    bg_center = nonlinear_reduction_solve(model, sel, 1.0, lam).fields.background.at_center
    geo = GeometryData(n=5, R_g=-1.0, u0_at_xi=bg_center)
    spec, _ = theta_spec_for(sel, expansion_constants(5), geo, model.profile)
    return theta_critical_point(spec).t0


# ---------------------------------------------------------------- grid

def test_grid_resolves_scale():
    g = build_grid(2.0, 1e-2, 5)
    assert g.nodes[0] == 0.0
    assert g.nodes[1] <= 2.5e-3
    assert g.nodes[-1] == 2.0
    assert np.all(np.diff(g.nodes) > 0)


def test_grid_doubling_halves_spacing():
    g = build_grid(2.0, 1e-2, 5, 24)
    g2 = build_grid(2.0, 1e-2, 5, 48)
    assert g2.max_spacing == pytest.approx(0.5 * g.max_spacing, rel=0.05)
    r = g.refine()
    assert np.allclose(r.nodes[::2], g.nodes, rtol=1e-13, atol=0)


def test_grid_errors():
    with pytest.raises(BubblingError):
        build_grid(1e-3, 1e-2, 5)
    with pytest.raises(BubblingError):
        build_grid(2.0, 1e-2, 5, panels_per_decade=8)
    with pytest.raises(BubblingError):
        build_grid(2.0, 0.0, 5)


def test_cell_volumes_sum_to_ball():
    g = build_grid(2.0, 1e-3, 6)
    assert g.cell_volumes().sum() == pytest.approx(2.0 ** 6 / 6, rel=1e-13)


# ---------------------------------------------------------------- kernels

@pytest.mark.parametrize("ell", [0, 1])
def test_kernel_residual_second_order(ell):
    res = [kernel_residual(build_grid(1e3, 1.0, 5, ppd), ell) for ppd in (24, 48, 96)]
    orders = np.log2(np.array(res[:-1]) / np.array(res[1:]))
    assert np.all(np.abs(orders - 2.0) <= 0.3), orders


@pytest.mark.parametrize("n", [3, 5, 6, 8])
def test_kernel_eigen_counts(n):
    # the ball must be large enough that truncation does not lift Z0 (slow 1/r tail at n = 3)
    g = build_grid(1e6, 1.0, n, min_nodes=2000)
    counts, spectra = kernel_eigen_counts(g)
    assert counts == {0: 1, 1: 1, 2: 0}
    # the l = 0 sector also has the single negative direction of the bubble
    assert np.sum(spectra[0] < -10 * g.delta ** 2) == 1


def test_kernel_profile_sector_check():
    with pytest.raises(BubblingError):
        kernel_profile(build_grid(10.0, 1.0, 5), 2)


# ---------------------------------------------------------------- bordered solves

def _dense_bordered(op, rhs, z):
    """Dense numpy solve of the same saddle-point system (oracle)."""
    a = op.active
    off, diag = op.block()
    A = np.diag(diag) + np.diag(off, 1) + np.diag(off, -1)
    b = (op.mass * z)[a]
    m = diag.size
    Kd = np.zeros((m + 1, m + 1))
    Kd[:m, :m] = A
    Kd[:m, m] = -b
    Kd[m, :m] = b
    f = np.zeros(m + 1)
    f[:m] = (op.mass * rhs)[a]
    y = np.linalg.solve(Kd, f)
    phi = np.zeros(op.grid.size)
    phi[a] = y[:m]
    return phi, y[m]


def test_bordered_matches_dense_oracle():
    g = build_grid(20.0, 1.0, 5, 12)
    assert g.size < 500
    op = bubble_sector_operator(g, 0)
    z = kernel_profile(g, 0)
    rhs = smooth_test_load(g.nodes, center=3.0, width=2.0)
    phi, c = projected_linear_solve(op, rhs, [z])
    ref, cref = _dense_bordered(op, rhs, z)
    assert np.max(np.abs(phi - ref)) <= 1e-9 * np.max(np.abs(ref))
    assert c[0] == pytest.approx(cref, rel=1e-9)


def test_bordered_kernel_load():
    g = build_grid(1e3, 1.0, 5)
    op = bubble_sector_operator(g, 0)
    z = kernel_profile(g, 0)
    phi, c = projected_linear_solve(op, z, [z])
    assert np.max(np.abs(phi)) < 1e-6
    assert c[0] == pytest.approx(-1.0, abs=1e-6)


@settings(max_examples=15, deadline=None)
@given(center=st.floats(0.5, 50.0), width=st.floats(0.1, 1.0))
def test_constraint_exactness(center, width):
    g = build_grid(1e3, 1.0, 5, 24)
    op = bubble_sector_operator(g, 0)
    z = kernel_profile(g, 0)
    solver = BorderedSolver(op, [z])
    phi, _ = solver.solve(smooth_test_load(g.nodes, center, width * center))
    assert solver.orthogonality(phi) < 1e-9


def test_bordered_linearity():
    g = build_grid(1e3, 1.0, 6, 24)
    op = bubble_sector_operator(g, 0)
    z = kernel_profile(g, 0)
    s = BorderedSolver(op, [z])
    f1 = smooth_test_load(g.nodes, 2.0, 1.0)
    f2 = smooth_test_load(g.nodes, 20.0, 5.0)
    p1, c1 = s.solve(f1)
    p2, c2 = s.solve(f2)
    p, c = s.solve(2.0 * f1 - 3.0 * f2)
    scale = np.max(np.abs(p))
    assert np.max(np.abs(p - (2.0 * p1 - 3.0 * p2))) <= 1e-10 * scale


# ---------------------------------------------------------------- error field

def test_trivial_model_has_zero_error():
    model, sel = trivial_setup()
    ef = assemble_error_field(model, sel, 1.0, 1e-2)
    assert np.all(ef.total == 0.0)
    state = nonlinear_reduction_solve(model, sel, 1.0, 1e-2)
    assert state.iterations == 1
    assert np.all(state.phi == 0.0)


def test_vanishing_background_split():
    geo = GeometryData(n=5, R_g=0.0, u0_at_xi=1.0)
    prof = FlatnessProfile.from_alpha(0, [1.0] * 5)
    model = ModelProblem(geometry=geo, profile=prof)
    sel = classify_regime(geo, prof)
    lam = 1e-2
    ef = assemble_error_field(model, sel, 1.0, lam)
    assert np.all(ef.E2 == 0.0)
    mu = mu_value(sel, 1.0, lam)
    from bubbling.bubble_core import bubble_radial, eval_cutoff
    r = ef.grid.nodes
    W = eval_cutoff(r, model.cutoff) * mu ** -1.5 * bubble_radial(r / mu, 5)
    expected = -lam ** -3.5 * model.h(r) * W ** (7.0 / 3.0)
    assert np.allclose(ef.E3, expected, rtol=1e-12, atol=0)


def test_error_split_sums(n5):
    model, sel = n5
    ef = assemble_error_field(model, sel, 1.0, 1e-2)
    assert np.array_equal(ef.total, ef.E1 + ef.E2 + ef.E3)
    assert all(np.all(np.isfinite(x)) for x in (ef.E1, ef.E2, ef.E3))


def test_cutoff_beyond_domain_rejected():
    geo = GeometryData(n=5, R_g=-1.0, u0_at_xi=1.0)
    prof = FlatnessProfile.from_alpha(0, [1.0] * 5)
    model = ModelProblem(geometry=geo, profile=prof, R_max=0.5)
    with pytest.raises(BubblingError):
        assemble_error_field(model, classify_regime(geo, prof), 1.0, 1e-2)


def test_error_sweep_n5(n5):
    model, sel = n5
    sw = error_scaling_sweep(model, sel, 1.0, np.logspace(-3, -1, 13))
    assert sw.theoretical == pytest.approx(4.5)
    assert sw.slope >= 0.9 * 4.5
    assert np.all(np.diff(sw.norms) > 0)


def test_error_sweep_needs_span(n5):
    model, sel = n5
    with pytest.raises(BubblingError):
        error_scaling_sweep(model, sel, 1.0, np.logspace(-2, -1, 6))
    with pytest.raises(BubblingError):
        error_scaling_sweep(model, sel, 1.0, np.logspace(-3, -1, 4))


@pytest.mark.parametrize("lam", [1e-3, 1e-2, 1e-1])
def test_error_norm_grid_halving(lam):
    coarse, sel = n5_setup(24)
    fine, _ = n5_setup(48)
    a = assemble_error_field(coarse, sel, 1.0, lam).norm()
    b = assemble_error_field(fine, sel, 1.0, lam).norm()
    assert abs(a - b) < 0.01 * b


# ---------------------------------------------------------------- linear theory

def test_stability_constant_uniform(n5):
    model, sel = n5
    cs = [linear_stability_constant(model, sel, 1.0, lam) for lam in (1e-3, 1e-2, 1e-1)]
    assert max(cs) / min(cs) < 3.0


def test_stability_constant_richardson():
    vals = []
    for ppd in (24, 48, 96, 192):
        model, sel = n5_setup(ppd)
        vals.append(linear_stability_constant(model, sel, 1.0, 1e-2))
    d = np.diff(vals)
    ratio = d[-2] / d[-1]
    assert 3.5 <= ratio <= 4.5, (vals, ratio)


# ---------------------------------------------------------------- contraction

def test_contraction_n5(n5_state):
    s = n5_state
    assert s.converged and s.iterations <= 20
    assert s.contraction_ratio < 0.5
    assert s.min_u > 0.0
    assert s.fixed_point_residual < 1e-8
    assert s.orthogonality < 1e-9


def test_eta_stable_over_decade(n5):
    model, sel = n5
    etas = [nonlinear_reduction_solve(model, sel, 1.0, lam).eta for lam in (1e-3, 3e-3, 1e-2)]
    ref = etas[-1]
    assert all(abs(e - ref) <= 0.5 * ref for e in etas)


def test_phi_norm_default_grid_control():
    # only the default budget and its doubling are compared; see the ledger on
    # the dilation content of phi in the core at finer grids
    a = nonlinear_reduction_solve(*n5_setup(24), 1.0, 1e-2)
    b = nonlinear_reduction_solve(*n5_setup(48), 1.0, 1e-2)
    assert abs(a.norm_phi - b.norm_phi) < 0.02 * b.norm_phi
    assert abs(a.norm_E - b.norm_E) < 0.01 * b.norm_E


def test_h1_norm_of_constant():
    g = build_grid(2.0, 1e-2, 5)
    assert h1_norm(np.ones(g.size), g) == pytest.approx(math.sqrt(sphere_area(5) * 2.0 ** 5 / 5),
                                                        rel=1e-13)


# ---------------------------------------------------------------- energy

def test_energy_matches_reduced_function(n5):
    model, sel = n5
    lam = 1e-2
    t0 = _t0(model, sel, lam)
    const = expansion_constants(5)
    for f in (0.5, 1.0, 2.0):
        t = f * t0
        state = nonlinear_reduction_solve(model, sel, t, lam)
        en = reduced_energy_numeric(model, sel, t, lam, state)
        geo = GeometryData(n=5, R_g=-1.0, u0_at_xi=state.fields.background.at_center)
        ex = reduced_energy_expansion(sel, const, geo, model.profile, t, np.zeros(5), lam)
        scaled = en.deviation * lam ** -9
        assert scaled == pytest.approx(-ex.theta, rel=0.1)


def test_energy_approaches_reference(n5):
    model, sel = n5
    devs = []
    for lam in (1e-1, 3e-2, 1e-2, 3e-3):
        state = nonlinear_reduction_solve(model, sel, 1.0, lam)
        en = reduced_energy_numeric(model, sel, 1.0, lam, state)
        assert en.J == en.reference + en.deviation
        devs.append(abs(en.deviation))
    assert np.all(np.diff(devs) < 0)


def test_phi_is_higher_order(n5, n5_state):
    model, sel = n5
    en = reduced_energy_numeric(model, sel, 1.0, 1e-2, n5_state)
    assert abs(en.phi_part) < abs(en.deviation_without_phi)


def test_energy_requires_matching_state(n5, n5_state):
    model, sel = n5
    with pytest.raises(BubblingError):
        reduced_energy_numeric(model, sel, 2.0, 1e-2, n5_state)


# ---------------------------------------------------------------- u0 and nondegeneracy

def _dense_lambda1(model, grid, h):
    """Smallest eigenvalue of the pencil (A, M) by a dense numpy eigensolve (oracle)."""
    from bubbling import _kernels as K
    res = u0_solve_and_eigen(model, grid=grid, h_values=h)
    d = model.dims
    M = grid.cell_volumes()
    off, stiff = K.stiffness(grid.nodes, grid.faces, model.n)
    diag = stiff + M * (d.cf * model.geometry.R_g - d.pf * h * res.u0.values ** (d.pf - 1.0))
    A = np.diag(diag) + np.diag(off, 1) + np.diag(off, -1)
    s = 1.0 / np.sqrt(M)
    return res.lambda_1, np.linalg.eigvalsh(A * s[:, None] * s[None, :])[0]


def test_u0_constant_h():
    model, _ = n5_setup(min_nodes=2000)
    g = build_grid(2.0, 2.0, 5, 24, 2000)
    res = u0_solve_and_eigen(model, grid=g, h_values=np.full(g.size, -0.7))
    d = dim_constants(5)
    assert np.allclose(res.u0.values, (d.cf * -1.0 / -0.7) ** (1.0 / (d.pf - 1.0)), rtol=1e-10)
    assert res.lambda_1 == pytest.approx(d.cf * 1.0 * (d.pf - 1.0), rel=0.01)


def test_u0_dense_oracle():
    model, _ = n5_setup()
    g = build_grid(2.0, 2.0, 5, 24, 150)
    lam1, ref = _dense_lambda1(model, g, model.h(g.nodes))
    assert lam1 == pytest.approx(ref, rel=1e-9)


def test_u0_nonconstant_refinement():
    vals = []
    for nodes in (250, 500, 1000, 2000):
        model, _ = n5_setup(min_nodes=nodes)
        vals.append(u0_solve_and_eigen(model).lambda_1)
    assert vals[-1] > 0
    assert abs(vals[-2] - vals[-1]) <= 0.02 * vals[-1]
    d = np.diff(vals)
    ratios = d[:-1] / d[1:]
    assert np.all((ratios >= 3.5) & (ratios <= 4.5)), ratios


def test_u0_requires_negative_curvature():
    geo = GeometryData(n=5, R_g=0.0, u0_at_xi=1.0)
    model = ModelProblem(geometry=geo, profile=FlatnessProfile.from_alpha(0, [1.0] * 5))
    with pytest.raises(BubblingError):
        u0_solve_and_eigen(model)
    model, _ = n5_setup()
    g = build_grid(2.0, 2.0, 5, 24, 100)
    with pytest.raises(BubblingError):
        u0_solve_and_eigen(model, grid=g, h_values=np.zeros(g.size))


# ---------------------------------------------------------------- correction field

def test_V_flat_is_zero():
    cf = correction_V_solve(CurvatureData.flat(6), dim_constants(6))
    assert cf.nu == 0.0
    assert all(np.all(v == 0.0) for v in cf.sector_values.values())


def _nu_oracle(n, R_g):
    d = dim_constants(n)
    mpmath.mp.dps = 30
    a2 = mpmath.mpf(n * (n - 2)) ** ((n - 2) / mpmath.mpf(2))
    u2 = mpmath.quad(lambda r: a2 * (1 + r * r) ** (2 - n) * r ** (n - 1), [0, 1, mpmath.inf])
    z2 = mpmath.quad(lambda r: (float(kernel_z0_radial(np.array([float(r)]), n)[0]) ** 2
                                * r ** (n - 1)), [0, 1, 10, 100, mpmath.inf])
    return float(-d.cf * R_g * u2 / z2)


@pytest.mark.parametrize("n", [5, 7])
def test_V_scalar_nu(n):
    cf = correction_V_solve(CurvatureData.flat(n, scalar=1.0), dim_constants(n))
    assert cf.nu == pytest.approx(_nu_oracle(n, 1.0), rel=1e-5)
    assert cf.orthogonality < 1e-9
    assert cf.decay_exponent >= (n - 4) / 2.0 - 0.1


def test_V_curved_tail_and_orthogonality():
    n = 6
    rng = np.random.default_rng(3)
    S = rng.normal(size=(n, n))
    S = S + S.T
    # Kulkarni-Nomizu product of S with the identity has every curvature symmetry
    g = np.eye(n)
    R = (np.einsum("ib,aj->iabj", S, g) + np.einsum("aj,ib->iabj", S, g)
         - np.einsum("ij,ab->iabj", S, g) - np.einsum("ab,ij->iabj", S, g))
    curv = CurvatureData(n=n, riemann=R, christoffel_lin=np.zeros((n, n)), scalar=0.3)
    assert np.any(curv.quadratic_forms()[0] != 0.0)
    cf = correction_V_solve(curv, dim_constants(n))
    assert cf.orthogonality < 1e-9
    assert cf.decay_exponent >= (n - 4) / 2.0 - 0.1


@pytest.mark.parametrize("n", [3, 4])
def test_V_low_dimension_rejected(n):
    with pytest.raises(DimensionError):
        correction_V_solve(CurvatureData.flat(n, scalar=1.0), dim_constants(n))
