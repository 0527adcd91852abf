import numpy as np
import pytest

from artifact.errors import IncompatibleGrids, PositivityLoss
from artifact.euler0_builder import build_euler_flow, canonical_shear, uniform_shear, zero_perturbation
from artifact.euler1_solver import Euler1Layer
from artifact.grid_core import ScalarField, build_grid, d_axis
from artifact.outer_sampling import OuterSampler
from artifact.prandtl1_solver import ChiCutoff, Prandtl1Layer
from artifact.profile_assembly import (assemble_profiles, build_stack, certify_profile_bounds, compute_P2p,
                                       compute_residuals, leading_layer)
from conftest import canonical_layers


def _zero_euler1(flow):
    z = ScalarField(flow.grid, np.zeros(flow.grid.shape))
    return Euler1Layer(flow.grid, z, z, z, z, z, None)


def _zero_prandtl1(grid):
    z = ScalarField(grid, np.zeros(grid.shape))
    return Prandtl1Layer(z, z, z, z, z, z, z, z, z)


def _leading_only(shear, ub=2.0, eps=1e-2):
    flow = build_euler_flow(0.25, 41, 0.0, shear=shear, pert=zero_perturbation(0.25))
    g = build_grid(0.25, 30.0, 41, 81, 2.0, eps)
    p0 = leading_layer(flow, g, ub=ub)
    return flow, g, p0, assemble_profiles(flow, p0, _zero_euler1(flow), _zero_prandtl1(g))


@pytest.fixture(scope="module")
def stack():
    flow, g, p0, e1 = canonical_layers(1e-2)
    return build_stack(flow, g, p0=p0, e1=e1)


def test_shear_flow_with_zero_correctors():
    flow, g, p0, st = _leading_only(canonical_shear())
    S = OuterSampler(flow.grid, g)
    np.testing.assert_allclose(st.us.values, S(flow.u0e.values) + p0.u0p.values, atol=1e-14)
    np.testing.assert_allclose(st.vs.values, p0.v0p.values, atol=1e-14)


def test_P2p_vanishes_without_layers():
    flow, g, p0, st = _leading_only(uniform_shear(), ub=1.0)
    assert np.abs(p0.u0p.values).max() < 1e-14
    P2 = compute_P2p(st)
    assert np.abs(P2.values).max() < 1e-10


def test_gamma_and_grid_guards():
    flow, g, p0, _ = _leading_only(canonical_shear())
    with pytest.raises(ValueError):
        assemble_profiles(flow, p0, _zero_euler1(flow), _zero_prandtl1(g), gamma=0.25)
    other = build_grid(0.25, 30.0, 41, 41, 2.0, 1e-2)
    with pytest.raises(IncompatibleGrids):
        assemble_profiles(flow, p0, _zero_euler1(flow), _zero_prandtl1(other))


def test_vs_wall_trace_cancels(stack):
    assert stack.report["vs_wall"] < 1e-6
    assert stack.report["min_us"] > 0


def test_vs_close_to_scaled_outer_velocity_uniformly_in_eps():
    gaps = []
    for eps in (1e-2, 1e-3, 1e-4):
        flow, g, p0, e1 = canonical_layers(eps)
        gaps.append(build_stack(flow, g, p0=p0, e1=e1).report["vs_minus_outer"])
    assert max(gaps) / min(gaps) < 2.0


def test_P2p_gauge_and_differentiate_back():
    defects = []
    for ny in (81, 161):
        flow, g, p0, e1 = canonical_layers(1e-2, ny=ny)
        st = build_stack(flow, g, p0=p0, e1=e1)
        P2, G = st.P2p.values, st.parts["P2"]["G"]
        assert np.abs(P2[:, -1]).max() == 0.0
        defects.append(np.abs(d_axis(P2, g.y, 1) + G)[:, 1:-1].max())
    assert defects[0] / defects[1] > 3.0


def test_P2p_decays_like_inverse_square(stack):
    # at eps = 1e-2 the cutoff band y in [1, 4]/sqrt(eps) sits inside the grid and
    # carries P2p out to y ~ 17 (C = 3.59 measured); at eps = 1e-4 it decays at once
    g = stack.grid
    assert (np.abs(stack.P2p.values) * (1 + g.y[None, :] ** 2)).max() < 5.0
    flow, g, p0, e1 = canonical_layers(1e-4)
    P2 = np.abs(build_stack(flow, g, p0=p0, e1=e1).P2p.values)
    weighted = P2 * (1 + g.y[None, :] ** 2)
    assert weighted.max() < 0.2
    assert weighted[:, g.y > 20.0].max() < 1e-5


def test_residual_decomposition(stack):
    se = np.sqrt(stack.eps)
    from artifact.profile_assembly import assembled_residuals
    Ru1, _, Rt = assembled_residuals(stack)
    expected = Rt + se * stack.p1.Rup.values + stack.eps * stack.parts["P2"]["P_x"]
    np.testing.assert_allclose(Ru1, expected, atol=1e-14)


def test_assembled_and_direct_residuals_agree(stack):
    assert stack.report["relative_mismatch"] < 0.05


@pytest.mark.slow
def test_residual_mismatch_converges_under_refinement():
    mism = []
    for nx, ny, nY in ((81, 161, 481), (161, 321, 961)):
        flow, g, p0, e1 = canonical_layers(1e-2, nx=nx, ny=ny, nY=nY)
        rep = build_stack(flow, g, p0=p0, e1=e1).report
        mism.append((rep["mismatch_u"], rep["mismatch_v"]))
    assert mism[0][0] / mism[1][0] > 3.0
    assert mism[0][1] / mism[1][1] > 3.0


def test_recomputing_residuals_is_idempotent(stack):
    before = stack.Ru1.values.copy()
    compute_residuals(stack)
    np.testing.assert_array_equal(before, stack.Ru1.values)


@pytest.mark.parametrize("k", [1, 2])
def test_outer_scaling_identity(k):
    flow, g, _, _ = canonical_layers(1e-3)
    S = OuterSampler(flow.grid, g)
    fg = flow.grid
    dk = flow.u0e.values
    for _ in range(k):
        dk = d_axis(dk, fg.y, 1)
    lhs = g.y[None, :] ** k * np.sqrt(g.eps) ** k * S(dk)
    rhs = S(fg.y[None, :] ** k * dk)
    scale = np.abs(rhs).max()
    # the two sides differ only by monotone-cubic interpolation of the weight Y^k
    np.testing.assert_allclose(lhs, rhs, atol=1e-3 * scale)
    # chain rule: differentiating the sampled field in y gives sqrt(eps) d_Y
    u1 = d_axis(flow.u0e.values, fg.y, 1)
    chain = d_axis(S(flow.u0e.values), g.y, 1)
    np.testing.assert_allclose(chain[:, 1:-1], np.sqrt(g.eps) * S(u1)[:, 1:-1],
                               atol=1e-3 * np.sqrt(g.eps) * np.abs(u1).max())


def test_uniform_bounds(stack):
    rep = certify_profile_bounds(stack)
    assert rep.passed and rep.min_us > 0
    flow = stack.flow
    c0 = flow.u0e.values.min()
    assert c0 <= rep.sups[("u", 0, 0)] <= flow.u0e.values.max() + 2.0
    assert len(rep.sups) == 12


def test_positivity_loss_is_raised(stack):
    saved = stack.us
    stack.us = saved.like(saved.values - 2.0 * saved.values.max())
    try:
        with pytest.raises(PositivityLoss):
            certify_profile_bounds(stack)
    finally:
        stack.us = saved
