import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import erfc

from artifact.euler0_builder import build_euler_flow, canonical_shear, uniform_shear, zero_perturbation
from artifact.euler1_solver import Euler1Layer
from artifact.grid_core import ScalarField, build_grid, cumulative_from_wall, d_axis, integrate
from artifact.outer_sampling import OuterSampler
from artifact.prandtl0_solver import Prandtl0Problem, march_dx, march_prandtl0
from artifact.prandtl1_solver import (ChiCutoff, apply_cutoff, assemble_F1, build_prandtl1, energy_ratio,
                                      first_order_operator, march_prandtl1, wall_traces)
from artifact.profile_assembly import leading_layer
from conftest import canonical_layers

CHI = ChiCutoff()


def _zero_euler1(flow):
    g = flow.grid
    z = ScalarField(g, np.zeros(g.shape))
    return Euler1Layer(g, z, z, z, z, z, None)


def _flat_layer(grid, ub=2.0, check=True):
    one, z = np.ones(grid.nx), np.zeros(grid.nx)
    prob = Prandtl0Problem(one, z, z, z, ub, lambda y: (ub - 1.0) * erfc(0.5 * np.asarray(y)))
    return march_prandtl0(prob, grid, check_decay=check)


def test_chi_admissibility():
    rep = CHI.admissibility()
    assert rep["value_at_0"] == 1.0
    assert abs(rep["mean"]) < 1e-10
    assert all(abs(v) < 1e-12 for v in rep["wall_derivatives"].values())
    y = np.linspace(0.0, 6.0, 601)
    np.testing.assert_allclose(CHI.integral_from(y)[y >= 4.0], 0.0, atol=1e-14)
    assert abs(float(CHI.integral_from(np.array(0.0)))) < 1e-10


def test_chi_rejects_overlapping_bump():
    with pytest.raises(ValueError):
        ChiCutoff(plateau=(1.0, 2.0), bump=(1.5, 3.0))


def test_F1_for_shear_flow_without_euler_corrector():
    flow = build_euler_flow(0.25, 41, 0.0, shear=canonical_shear(), pert=zero_perturbation(0.25))
    g = build_grid(0.25, 30.0, 41, 81, 2.0, 1e-2)
    p0 = leading_layer(flow, g)
    F1, terms = assemble_F1(flow, p0, _zero_euler1(flow), g, return_terms=True)
    for name in ("v0e_taylor", "v1e_slope", "u0ex_diff", "u1e_coupling"):
        assert np.abs(terms[name]).max() < 1e-14, name
    S = OuterSampler(flow.grid, g)
    np.testing.assert_allclose(terms["v0p_shear"], p0.v0p.values * S(flow.derivatives()["u_Y"]), atol=1e-14)
    np.testing.assert_allclose(F1.values, terms["v0p_shear"] + terms["u0e_diff"], atol=1e-14)


def test_F1_vanishes_for_uniform_flow():
    flow = build_euler_flow(0.25, 41, 0.0, shear=uniform_shear(), pert=zero_perturbation(0.25))
    g = build_grid(0.25, 30.0, 41, 81, 2.0, 1e-2)
    F1 = assemble_F1(flow, leading_layer(flow, g), _zero_euler1(flow), g)
    assert np.abs(F1.values).max() < 1e-13


def test_taylor_difference_matches_direct_quotient():
    flow, g, _, _ = canonical_layers(1e-2)
    d = flow.derivatives()
    S = OuterSampler(flow.grid, g)
    Y = S.Y[None, :]
    remainder = S.taylor_remainder(d["v_YY"])
    direct = S(d["v"]) - Y * d["v_Y"][:, :1]
    scale = np.abs(direct).max()
    # agreement up to the O(h^2) gap between the differenced v_YY and v itself
    assert np.abs(Y ** 2 * remainder - direct).max() < 1e-2 * scale
    # at the wall the quotient is v_YY(x,0) / 2
    np.testing.assert_allclose(remainder[:, 0], 0.5 * d["v_YY"][:, 0], rtol=1e-12, atol=0)


def test_F1_weighted_norms_uniform_in_eps():
    rows = []
    for eps in (1e-2, 1e-3, 1e-4):
        flow, g, p0, e1 = canonical_layers(eps)
        F1 = assemble_F1(flow, p0, e1, g).values
        w = np.sqrt(1 + g.y[None, :] ** 2)
        rows.append([np.sqrt(integrate((w ** m * d_axis(F1, g.y, 1, k) if k else w ** m * F1) ** 2, g))
                     for m in (0, 2) for k in (0, 1, 2)])
    rows = np.array(rows)
    assert np.all(np.isfinite(rows))
    assert np.all(rows.max(axis=0) / rows.min(axis=0) < 2.0)


def test_march_with_zero_data_is_zero():
    g = build_grid(0.25, 30.0, 21, 41, 2.0, 1e-2)
    u, v = march_prandtl1(np.zeros(g.shape), _flat_layer(g), g)
    assert np.abs(u).max() == 0.0 and np.abs(v).max() == 0.0


def _mms(ny):
    g = build_grid(0.25, 30.0, 41, ny, 2.0, 1e-2)
    p0 = _flat_layer(g)
    X, Y = g.mesh()
    u = (1 + X) * Y ** 2 * np.exp(-Y)
    ux = Y ** 2 * np.exp(-Y)
    uy = (1 + X) * (2 * Y - Y ** 2) * np.exp(-Y)
    uyy = (1 + X) * (2 - 4 * Y + Y ** 2) * np.exp(-Y)
    v = -(2 - (Y ** 2 + 2 * Y + 2) * np.exp(-Y))
    ub, vb = p0.ubar.values, p0.vbar.values
    f = ub * ux + march_dx(ub, g.dx) * u + vb * uy + d_axis(ub, g.y, 1) * v - uyy
    uh, vh = march_prandtl1(f, p0, g, u[0])
    return np.abs(uh - u).max(), np.abs(vh - v).max()


def test_march_manufactured_solution_second_order_in_y():
    errs = [_mms(ny) for ny in (41, 81, 161)]
    for a, b in zip(errs, errs[1:]):
        assert np.log2(a[0] / b[0]) >= 1.8
        assert np.log2(a[1] / b[1]) >= 1.8


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(-3, 3), st.floats(-3, 3))
def test_march_is_linear(seed, a, b):
    g = build_grid(0.25, 30.0, 9, 21, 2.0, 1e-2)
    p0 = _LINEAR_P0
    rng = np.random.default_rng(seed)
    f1, f2 = rng.normal(size=(2, *g.shape))
    i1, i2 = rng.normal(size=(2, g.ny))
    u1, v1 = march_prandtl1(f1, p0, g, i1)
    u2, v2 = march_prandtl1(f2, p0, g, i2)
    u, v = march_prandtl1(a * f1 + b * f2, p0, g, a * i1 + b * i2)
    np.testing.assert_allclose(u, a * u1 + b * u2, atol=1e-9 * (1 + np.abs(u).max()))
    np.testing.assert_allclose(v, a * v1 + b * v2, atol=1e-9 * (1 + np.abs(v).max()))


_LINEAR_P0 = _flat_layer(build_grid(0.25, 30.0, 9, 21, 2.0, 1e-2))


@pytest.fixture(scope="module")
def canonical_p1():
    flow, g, p0, e1 = canonical_layers(1e-2, ny=161)
    return g, p0, e1, build_prandtl1(flow, p0, e1, g)


def test_wall_conditions(canonical_p1):
    g, p0, e1, p1 = canonical_p1
    u1e0, _ = wall_traces(e1)
    np.testing.assert_allclose(p1.u1p.values[:, 0], -u1e0, atol=1e-14)
    assert np.abs(p1.v1p.values[:, 0]).max() == 0.0
    assert np.abs(p1.u_hom.values[:, 0]).max() == 0.0


def test_cutoff_leaves_plateau_region_unchanged(canonical_p1):
    g, _, _, p1 = canonical_p1
    near = g.y <= 1.0 / np.sqrt(g.eps)
    np.testing.assert_array_equal(p1.u1p.values[:, near], p1.up.values[:, near])


def test_continuity_is_exact_for_marching_quadrature(canonical_p1):
    g, _, _, p1 = canonical_p1
    v = -cumulative_from_wall(march_dx(p1.u1p.values, g.dx), g.y)
    np.testing.assert_allclose(p1.v1p.values, v, atol=1e-15)


def test_divergence_converges_in_y():
    # stations 0-2 carry the start-up corner layer and are excluded
    div = []
    for ny in (161, 321):
        flow, g, p0, e1 = canonical_layers(1e-2, ny=ny)
        p1 = build_prandtl1(flow, p0, e1, g)
        d = march_dx(p1.u1p.values, g.dx) + d_axis(p1.v1p.values, g.y, 1)
        div.append(np.abs(d[3:, 1:-1]).max())
    assert div[1] < 1e-3
    assert div[0] / div[1] > 3.0


def test_plateau_case_has_no_cutoff_error():
    g = build_grid(0.25, 0.9, 21, 41, 1.0, 1.0)
    p0 = _flat_layer(g, check=False)
    rng = np.random.default_rng(3)
    X, Y = g.mesh()
    u_hom = np.sin(np.pi * Y / 0.9) * (1 + X)
    v_hom = -cumulative_from_wall(march_dx(u_hom, g.dx), g.y)
    traces = (0.3 + 0.1 * g.x, np.full(g.nx, 0.1))
    F1 = rng.normal(size=g.shape)
    p1 = apply_cutoff(u_hom, v_hom, CHI, 1.0, p0, traces, F1)
    np.testing.assert_array_equal(p1.u1p.values, p1.up.values)
    assert np.abs(p1.Rup.values).max() == 0.0


def test_cutoff_remainder_agrees_with_direct_operator(canonical_p1):
    _, _, _, p1 = canonical_p1
    assert p1.report["direct_mismatch"] < 0.1


def test_energy_ratio_stable_under_refinement():
    ratios = []
    for ny in (81, 161):
        flow, g, p0, e1 = canonical_layers(1e-2, ny=ny)
        ratios.append(energy_ratio(build_prandtl1(flow, p0, e1, g).u_hom.values, g)["ratio"])
    assert all(np.isfinite(ratios))
    assert 0.5 < ratios[0] / ratios[1] < 2.0


def test_operator_annihilates_lift_free_zero():
    g = build_grid(0.25, 30.0, 9, 21, 2.0, 1e-2)
    z = np.zeros(g.shape)
    assert np.abs(first_order_operator(z, z, _LINEAR_P0)).max() == 0.0
