import numpy as np
import pytest
import sympy as sy

from artifact.errors import NoContraction, UnsupportedData
from artifact.grid_core import build_grid
from artifact.profile_assembly import build_stack
from artifact.remainder_solver import (BoundaryData, MacGrid, MacOperators, ProfileCoefficients, RemainderState,
                                       SolverOptions, assemble_linear_operator, bump_boundary_data,
                                       contraction_factor, homogenize_inflow, newton_solve, picard_iterate,
                                       remainder_problem, solve_full_ns, solve_linearized, zero_profile)
from artifact.smooth import Bump
from conftest import canonical_flow


def _stack(n=33, eps=1e-2):
    flow = canonical_flow(n)
    return build_stack(flow, build_grid(0.25, 30.0, n, n, 2.0, eps))


@pytest.fixture(scope="module")
def stack33():
    return _stack()


def _zero_forcing(g):
    return np.zeros(g.shape), np.zeros(g.shape)


def test_constant_profile_kernel_is_trivial():
    g = build_grid(0.25, 6.0, 17, 17, 1.5, 1e-2)
    s = assemble_linear_operator(ProfileCoefficients.constant(g), gamma=0.125)
    st = solve_linearized(s, *_zero_forcing(g))
    assert max(np.abs(st.u).max(), np.abs(st.v).max(), np.abs(st.P).max()) == 0.0
    # the outflow stress rows fix the pressure level: no null space
    assert np.linalg.matrix_rank(s.matrix.toarray()) == s.mac.size


def _mms_case():
    x, y = sy.symbols("x y")
    eps, Ym, L = 1e-2, 6.0, 0.25
    psi = (x ** 2 + x ** 3) * sy.sin(sy.pi * y / Ym) ** 2
    u, v = sy.diff(psi, y), -sy.diff(psi, x)
    P = sy.cos(3 * x) * sy.exp(-y / 3) + x * y / 10
    us = 1 + 0.5 * sy.tanh(y) + 0.2 * x
    vs = (sy.exp(-y) - 1) * 0.5 + x * y * 0.1
    S_u = us * u.diff(x) + us.diff(x) * u + vs * u.diff(y) + us.diff(y) * v
    S_v = us * v.diff(x) + vs.diff(x) * u + vs * v.diff(y) + vs.diff(y) * v
    f = -(u.diff(y, 2) + eps * u.diff(x, 2)) + S_u + P.diff(x)
    g = -(v.diff(y, 2) + eps * v.diff(x, 2)) + S_v + P.diff(y) / eps
    aL = (P - 2 * eps * u.diff(x)).subs(x, L)
    bL = (u.diff(y) + eps * v.diff(x)).subs(x, L)
    lam = lambda e: sy.lambdify((x, y), e, "numpy")
    fns = {k: lam(e) for k, e in dict(us=us, usx=us.diff(x), usy=us.diff(y), vs=vs, vsx=vs.diff(x),
                                       vsy=vs.diff(y), f=f, g=g, u=u, v=v).items()}
    aLf, bLf, bLy = sy.lambdify(y, aL), sy.lambdify(y, bL), sy.lambdify(y, bL.diff(y))
    return fns, (lambda t, n=0: aLf(t)), (lambda t, n=0: bLf(t) if n == 0 else bLy(t)), eps, Ym, L


def test_manufactured_solution_second_order():
    fns, aL, bL, eps, Ym, L = _mms_case()
    errs = []
    for n in (17, 33, 65):
        g = build_grid(L, Ym, n, n, 1.5, eps)
        X, Y = g.mesh()
        ev = lambda k, a, b: np.broadcast_to(fns[k](a, b), a.shape).astype(float)
        c = ProfileCoefficients(g, *(ev(k, X, Y) for k in ("us", "usx", "usy", "vs", "vsx", "vsy")))
        s = assemble_linear_operator(c, gamma=0.125)
        Xu, Yu = s.mac.u_points()
        Xv, Yv = s.mac.v_points()
        st = solve_linearized(s, ev("f", Xu, Yu), ev("g", Xv, Yv), aL, bL)
        errs.append((np.sqrt(np.mean((st.u - ev("u", Xu, Yu)) ** 2)),
                     np.sqrt(np.mean((st.v - ev("v", Xv, Yv)) ** 2))))
        assert np.abs(st.divergence()).max() < 1e-9 * max(1.0, np.abs(st.u).max())
    for a, b in zip(errs, errs[1:]):
        assert np.log2(a[0] / b[0]) >= 1.8
        assert np.log2(a[1] / b[1]) >= 1.8


def test_summation_by_parts():
    g = build_grid(0.25, 6.0, 13, 11, 2.0, 1e-2)
    mac = MacGrid(g)
    o = MacOperators(mac)
    rng = np.random.default_rng(7)
    P = rng.normal(size=mac.p_shape)
    u = rng.normal(size=mac.u_shape)
    v = rng.normal(size=mac.v_shape)
    w_p = mac.dx * mac.hy[None, :] * np.ones(mac.p_shape)
    w_u = mac.dx * mac.hy[None, :] * np.ones(mac.u_shape)
    w_v = mac.dx * np.concatenate([[0.0], np.diff(mac.ym), [0.0]])[None, :] * np.ones(mac.v_shape)
    div = (o.Div_u @ u.ravel() + o.Div_v @ v.ravel()).reshape(mac.p_shape)
    gx = (o.Gx @ P.ravel()).reshape(mac.u_shape)
    gy = (o.Gy @ P.ravel()).reshape(mac.v_shape)
    lhs = np.sum(w_p * P * div) + np.sum(w_u * gx * u) + np.sum(w_v * gy * v)
    boundary = (np.sum(mac.hy * (u[-1] * P[-1] - u[0] * P[0]))
                + mac.dx * np.sum(v[:, -1] * P[:, -1] - v[:, 0] * P[:, 0]))
    assert lhs == pytest.approx(boundary, abs=1e-11)
    # fields vanishing on the boundary: the two operators are exactly adjoint
    u[0] = u[-1] = 0.0
    v[:, 0] = v[:, -1] = 0.0
    div = (o.Div_u @ u.ravel() + o.Div_v @ v.ravel()).reshape(mac.p_shape)
    lhs = np.sum(w_p * P * div) + np.sum(w_u * gx * u) + np.sum(w_v * gy * v)
    assert abs(lhs) < 1e-11


def test_superposition(stack33):
    s = assemble_linear_operator(stack33)
    g = s.grid
    rng = np.random.default_rng(11)
    f1, g1, f2, g2 = rng.normal(size=(4, *g.shape))
    b1, b2 = Bump(2.0, 6.0, 0.3), Bump(3.0, 8.0, -0.2)
    a, b = 1.7, -0.6
    s1 = solve_linearized(s, f1, g1, b1, b2)
    s2 = solve_linearized(s, f2, g2, b2, b1)
    comb = lambda t, n=0: a * b1(t, n) + b * b2(t, n)
    comb2 = lambda t, n=0: a * b2(t, n) + b * b1(t, n)
    s12 = solve_linearized(s, a * f1 + b * f2, a * g1 + b * g2, comb, comb2)
    for name in ("u", "v", "P"):
        ref = a * getattr(s1, name) + b * getattr(s2, name)
        np.testing.assert_allclose(getattr(s12, name), ref, atol=1e-8 * np.abs(ref).max())


def test_repeat_solve_is_identical(stack33):
    s = assemble_linear_operator(stack33)
    f = np.random.default_rng(2).normal(size=s.grid.shape)
    a, b = (solve_linearized(s, f, 0.0 * f) for _ in range(2))
    np.testing.assert_array_equal(a.u, b.u)


def test_solution_is_discretely_divergence_free_and_meets_dirichlet_rows(stack33):
    pr = remainder_problem(stack33, bump_boundary_data(1e-2))
    st = picard_iterate(pr)
    assert np.abs(st.divergence()).max() < 1e-9 * np.abs(st.u).max()
    assert np.abs(st.u[0]).max() < 1e-12
    assert max(np.abs(st.v[:, 0]).max(), np.abs(st.v[:, -1]).max()) < 1e-12


def test_zero_data_converges_in_one_step(stack33):
    g = stack33.grid
    pr = remainder_problem(stack33, BoundaryData(), forcing=_zero_forcing(g))
    st = picard_iterate(pr)
    assert len(st.ledger) == 1
    assert np.abs(st.vector()).max() == 0.0


def test_regulariser_limit_is_first_order_in_alpha(stack33):
    bd = bump_boundary_data(1e-2)
    zs = [picard_iterate(remainder_problem(stack33, bd, SolverOptions(alpha=a))).vector()
          for a in (0.0, 1e-3, 5e-4, 2.5e-4)]
    d = [np.linalg.norm(z - zs[0]) for z in zs[1:]]
    assert 1.7 < d[0] / d[1] < 2.3 and 1.7 < d[1] / d[2] < 2.3
    extrapolated = 2 * zs[3] - zs[2]
    assert np.linalg.norm(extrapolated - zs[0]) < 0.2 * d[2]


def test_picard_matches_newton_oracle():
    flow = canonical_flow(17)
    st = build_stack(flow, build_grid(0.25, 30.0, 17, 17, 2.0, 1e-2))
    bd = BoundaryData(a0=Bump(2, 6, 3.0), b0=Bump(2, 6, 1.0), aL=Bump(2, 6, 0.3), bL=Bump(2, 6, 1.0))
    pr = remainder_problem(st, bd)
    rs = picard_iterate(pr, tol=1e-14)
    nw = newton_solve(pr)
    assert np.abs(rs.u).max() > 1e-2
    for name in ("u", "v", "P"):
        assert np.abs(getattr(rs, name) - getattr(nw, name)).max() < 1e-6
    assert 0 < rs.norm_report["contraction_factor"] < 1


def test_no_contraction_is_detected(stack33):
    g = stack33.grid
    pr = remainder_problem(stack33, bump_boundary_data(1e-2), forcing=(1e4 * np.ones(g.shape), np.zeros(g.shape)))
    with pytest.raises(NoContraction):
        picard_iterate(pr)


def test_contraction_factor_ignores_roundoff_steps():
    ledger = [{"x_norm": 1.0, "update_norm": 1.0, "contraction_factor": float("nan")},
              {"x_norm": 1.0, "update_norm": 1e-3, "contraction_factor": 1e-3},
              {"x_norm": 1.0, "update_norm": 1e-15, "contraction_factor": 1e-12},
              {"x_norm": 1.0, "update_norm": 5e-15, "contraction_factor": 5.0}]
    assert contraction_factor(ledger) == pytest.approx(1e-3)
    assert contraction_factor(ledger[:1]) == 0.0


def test_solver_options_validation():
    with pytest.raises(ValueError):
        SolverOptions(alpha=-1.0)
    with pytest.raises(ValueError):
        SolverOptions(damping=0.0)


def test_trivial_homogenizer(stack33):
    bd = BoundaryData(aL=Bump(2.0, 6.0, 0.1), bL=Bump(2.0, 6.0, 0.2))
    h = homogenize_inflow(bd, stack33)
    assert h.is_trivial
    assert np.abs(h.u0_aux.values).max() == 0.0 and np.abs(h.v0_aux.values).max() == 0.0
    assert np.abs(h.static_u).max() == 0.0 and np.abs(h.static_v).max() == 0.0
    y = np.linspace(0, 30, 301)
    np.testing.assert_array_equal(h.aL_bar(y), bd.aL(y))
    np.testing.assert_array_equal(h.bL_bar(y), bd.bL(y))


def test_lift_is_divergence_free_and_attains_inflow_data(stack33):
    bd = BoundaryData(a0=Bump(2.0, 4.0, 0.4), b0=Bump(2.0, 4.0, 1.0))
    h = homogenize_inflow(bd, stack33)
    for lift in (h.lift_u, h.lift_v):
        assert np.abs(lift["u0x"] + lift["v0y"]).max() == 0.0
    g = stack33.grid
    np.testing.assert_array_equal(h.u0_aux.values[0], bd.a0(g.y))
    np.testing.assert_array_equal(h.v0_aux.values[0], bd.b0(g.y))
    assert np.abs(h.u0_aux.values[:, 0]).max() == 0.0 and np.abs(h.v0_aux.values[:, 0]).max() == 0.0


def test_data_near_the_wall_is_rejected(stack33):
    with pytest.raises(UnsupportedData):
        homogenize_inflow(BoundaryData(b0=Bump(0.5, 3.0, 1.0)), stack33)


def test_lift_forcing_bounded_uniformly_in_eps():
    sups = []
    for eps in (1e-2, 1e-3, 1e-4):
        h = homogenize_inflow(bump_boundary_data(eps), _stack(eps=eps))
        _, Yu = h.mac.u_points()
        _, Yv = h.mac.v_points()
        w = lambda Y: (1 + Y ** 2) ** 2
        sups.append((np.abs(w(Yu).ravel() * h.static_u).max(),
                     np.abs(np.sqrt(eps) * w(Yv).ravel() * h.static_v).max()))
    sups = np.array(sups)
    assert sups[:, 0].max() / sups[:, 0].min() < 2.0
    assert sups[:, 1].max() <= 2.0 * sups[0, 1]


def test_full_solution_of_exact_profile(stack33):
    s = assemble_linear_operator(stack33)
    mac = s.mac
    zero = RemainderState(s, np.zeros(mac.u_shape), np.zeros(mac.v_shape), np.zeros(mac.p_shape),
                          np.zeros(mac.nu), np.zeros(mac.nv))
    sol = solve_full_ns(stack33, BoundaryData(), zero)
    se = np.sqrt(stack33.eps)
    E1, L1 = stack33.parts["E1"], stack33.parts["L1"]
    assert sol.u_error == pytest.approx(np.abs(se * (E1["u"] + L1["u"])).max(), rel=1e-12)
    assert sol.remainder_sup == 0.0


def test_zero_profile_helper():
    assert np.array_equal(zero_profile(np.arange(3.0), 2), np.zeros(3))
