"""Assembly of the approximate solution ``[u_s, v_s, P_s]`` and its residuals.

Everything lives on the boundary-layer grid.  Eulerian ingredients are sampled
at ``Y = sqrt(eps) y`` (their y-derivatives pick up factors of ``sqrt(eps)``);
layer fields are differentiated with the marching x-stencil and the standard
y-stencils, so the layer equations hold exactly on the grid.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import IncompatibleGrids, PositivityLoss
from .euler0_builder import EulerFlow
from .euler1_solver import Euler1Layer
from .grid_core import ScalarField, TensorGrid, cumulative_from_top, d_axis, trapz_weights
from .outer_sampling import OuterSampler
from .prandtl0_solver import Prandtl0Layer, march_dx
from .prandtl1_solver import Prandtl1Layer


def _outer(S: OuterSampler, d: dict, se: float, tag: str) -> dict:
    """Sampled Eulerian field with derivatives taken in the boundary-layer variable."""
    out = {}
    for name in ("u", "v"):
        out[name] = S(d[name], (tag, name))
        out[name + "_x"] = S(d[name + "_x"], (tag, name + "_x"))
        out[name + "_xx"] = S(d[name + "_xx"], (tag, name + "_xx"))
        out[name + "_Y"] = S(d[name + "_Y"], (tag, name + "_Y"))
        out[name + "_YY"] = S(d[name + "_YY"], (tag, name + "_YY"))
        out["lap_" + name] = out[name + "_xx"] + out[name + "_YY"]
    out["P_x"] = S(d["P_x"], (tag, "P_x"))
    out["P_Y"] = S(d["P_Y"], (tag, "P_Y"))
    return out


def _layer(u: np.ndarray, v: np.ndarray, g: TensorGrid) -> dict:
    dx = lambda a: march_dx(a, g.dx)
    dy = lambda a, k=1: d_axis(a, g.y, 1, k)
    return {"u": u, "u_x": dx(u), "u_y": dy(u), "u_yy": dy(u, 2), "u_xx": dx(dx(u)),
            "v": v, "v_x": dx(v), "v_y": dy(v), "v_yy": dy(v, 2), "v_xx": dx(dx(v))}


@dataclass
class LayerStack:
    grid: TensorGrid
    gamma: float
    flow: EulerFlow
    p0: Prandtl0Layer
    e1: Euler1Layer
    p1: Prandtl1Layer
    us: ScalarField
    vs: ScalarField
    Ps: ScalarField
    parts: dict = field(repr=False, default_factory=dict)
    P2p: ScalarField | None = None
    Ru1: ScalarField | None = None
    Rv1: ScalarField | None = None
    report: dict = field(default_factory=dict)

    @property
    def eps(self) -> float:
        return self.grid.eps

    def profile_derivatives(self) -> dict:
        """``u_s, v_s`` and their first and second derivatives in ``(x, y)``."""
        se = np.sqrt(self.eps)
        eps = self.eps
        E0, E1, L0, L1 = (self.parts[k] for k in ("E0", "E1", "L0", "L1"))
        return {
            "u": self.us.values,
            "u_x": E0["u_x"] + L0["u_x"] + se * E1["u_x"] + se * L1["u_x"],
            "u_y": se * E0["u_Y"] + L0["u_y"] + eps * E1["u_Y"] + se * L1["u_y"],
            "u_yy": eps * E0["u_YY"] + L0["u_yy"] + eps * se * E1["u_YY"] + se * L1["u_yy"],
            "u_xx": E0["u_xx"] + L0["u_xx"] + se * E1["u_xx"] + se * L1["u_xx"],
            "v": self.vs.values,
            "v_x": E0["v_x"] / se + L0["v_x"] + E1["v_x"] + se * L1["v_x"],
            "v_y": E0["v_Y"] + L0["v_y"] + se * E1["v_Y"] + se * L1["v_y"],
            "v_yy": se * E0["v_YY"] + L0["v_yy"] + eps * E1["v_YY"] + se * L1["v_yy"],
            "v_xx": E0["v_xx"] / se + L0["v_xx"] + E1["v_xx"] + se * L1["v_xx"],
        }


def assemble_profiles(flow: EulerFlow, p0: Prandtl0Layer, e1: Euler1Layer, p1: Prandtl1Layer,
                      gamma: float = 0.125) -> LayerStack:
    """``u_s = u0e + u0p + sqrt(eps)(u1e + u1p)``, ``v_s = v0e/sqrt(eps) + v0p + v1e + sqrt(eps) v1p``."""
    if not 0 < gamma < 0.25:
        raise ValueError("gamma must lie in (0, 1/4)")
    g = p0.grid
    if p1.u1p.grid != g:
        raise IncompatibleGrids("Prandtl layers must share one grid")
    if e1.grid.nx != g.nx or flow.grid.nx != g.nx:
        raise IncompatibleGrids("Eulerian and boundary-layer grids must share their x-nodes")
    se = np.sqrt(g.eps)
    S = OuterSampler(flow.grid, g)
    parts = {"E0": _outer(S, flow.derivatives(), se, "E0"),
             "E1": _outer(S, e1.derivatives(), se, "E1"),
             "L0": _layer(p0.u0p.values, p0.v0p.values, g),
             "L1": _layer(p1.u1p.values, p1.v1p.values, g),
             "sampler": S}
    E0, E1 = parts["E0"], parts["E1"]
    us = E0["u"] + p0.u0p.values + se * E1["u"] + se * p1.u1p.values
    vs = E0["v"] / se + p0.v0p.values + E1["v"] + se * p1.v1p.values
    P = S(flow.P0e.values) + se * S(e1.P1e.values)
    mk = lambda a: ScalarField(g, a)
    stack = LayerStack(g, gamma, flow, p0, e1, p1, mk(us), mk(vs), mk(P), parts)
    stack.report["min_us"] = float(us.min())
    stack.report["vs_wall"] = float(np.abs(vs[:, 0]).max())
    stack.report["vs_minus_outer"] = float(np.abs(vs - E0["v"] / se).max())
    return stack


def compute_P2p(stack: LayerStack) -> ScalarField:
    """``P2p = int_y^{y_max} G`` so that ``P2p_y = -G`` cancels the O(1) part of the v-equation."""
    g = stack.grid
    se = np.sqrt(g.eps)
    eps = g.eps
    E0, E1, L0, L1 = (stack.parts[k] for k in ("E0", "E1", "L0", "L1"))
    u0p, u1p = L0["u"], L1["u"]
    G = (L0["v_x"] * stack.us.values
         + E0["v_x"] / se * (u0p + se * u1p)
         + E1["v_x"] * (u0p + se * u1p)
         + E0["v"] / se * L0["v_y"] + E0["v"] * L1["v_y"]
         + L0["v"] * (E0["v_Y"] + L0["v_y"] + se * E1["v_Y"] + se * L1["v_y"])
         + E1["v"] * (L0["v_y"] + se * L1["v_y"])
         - (L0["v_yy"] + eps * L0["v_xx"]))
    P2 = cumulative_from_top(G, g.y)
    stack.P2p = ScalarField(g, P2)
    stack.parts["P2"] = {"P": P2, "P_x": march_dx(P2, g.dx), "P_y": d_axis(P2, g.y, 1), "G": G}
    stack.Ps = ScalarField(g, stack.Ps.values + eps * P2)
    return stack.P2p


def _first_order_residual(stack: LayerStack) -> np.ndarray:
    """The cutoff error ``R^u_p`` as the layer module defines it."""
    return stack.p1.Rup.values


def assembled_residuals(stack: LayerStack):
    """``R^{u,1} = Rtilde + sqrt(eps) R^u_p + eps P2p_x`` and ``R^{v,1}``."""
    g = stack.grid
    eps = g.eps
    se = np.sqrt(eps)
    y = g.y[None, :]
    S = stack.parts["sampler"]
    fd, ed = stack.flow.derivatives(), stack.e1.derivatives()
    E0, E1, L0, L1 = (stack.parts[k] for k in ("E0", "E1", "L0", "L1"))
    u1e, u1p, v1p = E1["u"], L1["u"], L1["v"]
    # v1e(x,0) as used by the leading layer versus the Eulerian wall value
    trace_gap = (ed["v"][:, 0] - stack.p0.problem.v1e_wall)[:, None]
    # v1e is evaluated by differences of sampled values: its Y-derivatives are
    # poorly resolved in the corner layer near (0, 0), so a Taylor remainder
    # built from them does not match the sampled field.
    v1e_minus_wall = E1["v"] - stack.p0.problem.v1e_wall[:, None]
    v1e_taylor = v1e_minus_wall - se * y * ed["v_Y"][:, :1]
    v0e_taylor = eps * y ** 2 * S.taylor_remainder(fd["v_YY"])
    u0e_diff = se * y * S.mean_slope(fd["u_Y"])
    u0ex_diff = se * y * S.mean_slope(fd["u_xY"])
    Rt = (eps * se * v1p * E1["u_Y"] + eps * v1p * L1["u_y"]
          + v0e_taylor * L1["u_y"] + v1e_taylor * L0["u_y"]
          + se * v1e_minus_wall * L1["u_y"]
          + se * u0e_diff * L1["u_x"] + se * u1p * u0ex_diff
          + eps * ((u1e + u1p) * L1["u_x"] + E1["u_x"] * u1p + E0["u_Y"] * v1p)
          - eps * L0["u_xx"] - eps * se * L1["u_xx"]
          + eps * (u1e * E1["u_x"] + E1["v"] * E1["u_Y"] - E0["lap_u"] - se * E1["lap_u"]))
    Ru1 = Rt + se * _first_order_residual(stack) + eps * stack.parts["P2"]["P_x"]
    U = stack.us.values
    Rv1 = (se * L1["v_x"] * U - se * (L1["v_yy"] + eps * L1["v_xx"])
           + se * v1p * (E0["v_Y"] + L0["v_y"] + se * E1["v_Y"] + se * L1["v_y"])
           - se * E0["lap_v"] - eps * E1["lap_v"]
           + se * u1e * E1["v_x"] + se * E1["v"] * E1["v_Y"])
    return Ru1, Rv1, Rt


def direct_residuals(stack: LayerStack):
    """Scaled Navier-Stokes operator applied to ``(u_s, v_s, P_s)`` with the same stencils."""
    eps = stack.eps
    se = np.sqrt(eps)
    d = stack.profile_derivatives()
    E0, E1, P2 = stack.parts["E0"], stack.parts["E1"], stack.parts["P2"]
    P_x = E0["P_x"] + se * E1["P_x"] + eps * P2["P_x"]
    P_y_over_eps = E0["P_Y"] / se + E1["P_Y"] + P2["P_y"]
    Ru = d["u"] * d["u_x"] + d["v"] * d["u_y"] + P_x - d["u_yy"] - eps * d["u_xx"]
    Rv = d["u"] * d["v_x"] + d["v"] * d["v_y"] + P_y_over_eps - d["v_yy"] - eps * d["v_xx"]
    return Ru, Rv


def residual_mask(grid: TensorGrid, margin: int = 0) -> np.ndarray:
    """Nodes where the remainder equations are posed (excludes x = 0, the wall and the top)."""
    m = np.zeros(grid.shape, dtype=bool)
    m[1:, 1 + margin: grid.ny - 1 - margin] = True
    return m


def masked_l2(values: np.ndarray, grid: TensorGrid, mask: np.ndarray) -> float:
    w = np.outer(trapz_weights(grid.x), trapz_weights(grid.y))
    return float(np.sqrt(np.sum(w * mask * values ** 2)))


def residual_norm(Ru, Rv, grid: TensorGrid) -> dict:
    """``||R^u, sqrt(eps) R^v||_{L2} + ||<y> d_y {R^u, sqrt(eps) R^v}||_{L2}``."""
    se = np.sqrt(grid.eps)
    m0 = residual_mask(grid)
    m2 = residual_mask(grid, margin=2)
    wy = np.sqrt(1.0 + grid.y ** 2)[None, :]
    base = np.hypot(masked_l2(Ru, grid, m0), masked_l2(se * Rv, grid, m0))
    dRu = wy * d_axis(Ru, grid.y, 1)
    dRv = wy * d_axis(se * Rv, grid.y, 1)
    weighted = np.hypot(masked_l2(dRu, grid, m2), masked_l2(dRv, grid, m2))
    return {"L2": base, "weighted": weighted, "total": base + weighted}


def compute_residuals(stack: LayerStack) -> tuple[ScalarField, ScalarField]:
    """Assemble ``R^{u,1}, R^{v,1}`` and cross-check them against the direct operator."""
    if stack.P2p is None:
        compute_P2p(stack)
    g = stack.grid
    Ru1, Rv1, Rt = assembled_residuals(stack)
    Ru, Rv = direct_residuals(stack)
    stack.Ru1 = ScalarField(g, Ru1)
    stack.Rv1 = ScalarField(g, Rv1)
    assembled = residual_norm(Ru1, Rv1, g)
    mismatch = residual_norm(Ru - Ru1, Rv - Rv1, g)
    m0 = residual_mask(g)
    stack.report.update(
        residual=assembled,
        mismatch=mismatch,
        relative_mismatch=mismatch["L2"] / max(assembled["L2"], 1e-300),
        mismatch_u=masked_l2(Ru - Ru1, g, m0),
        mismatch_v=masked_l2(Rv - Rv1, g, m0),
    )
    return stack.Ru1, stack.Rv1


@dataclass
class UniformBoundReport:
    min_us: float
    sups: dict
    passed: bool
    eps: float


def _scaled_outer_derivative(values, grid, k, j, shift):
    """``Y^k d_Y^(k+shift) d_x^j`` of an Eulerian field on its own grid."""
    a = values
    for _ in range(j):
        a = d_axis(a, grid.x, 0)
    for _ in range(k + shift):
        a = d_axis(a, grid.y, 1)
    return grid.y[None, :] ** k * a


def _scaled_layer_derivative(values, grid, k, j, shift):
    a = values
    for _ in range(j):
        a = d_axis(a, grid.x, 0)
    for _ in range(k + shift):
        a = d_axis(a, grid.y, 1)
    return grid.y[None, :] ** k * a


def certify_profile_bounds(stack: LayerStack, k_max: int = 2, j_max: int = 1) -> UniformBoundReport:
    """``sup |y^k d_y^k d_x^j u_s|`` and ``sup |y^k d_y^(k+1) d_x^j v_s|`` over the half-line.

    Outer terms use ``y^k d_y^k = Y^k d_Y^k``: they are differentiated on the
    Eulerian grid and then sampled, and above the layer grid (``Y > sqrt(eps) y_max``,
    where the layer terms have decayed) the sup is taken over Eulerian nodes.
    """
    g = stack.grid
    se = np.sqrt(g.eps)
    us = stack.us.values
    min_us = float(us.min())
    if min_us <= 0:
        raise PositivityLoss("assembled profile u_s", min_us)
    S = stack.parts["sampler"]
    fg = stack.flow.grid
    e0 = stack.flow.derivatives()
    e1 = stack.e1.derivatives()
    L0, L1 = stack.parts["L0"], stack.parts["L1"]
    above = fg.y > se * g.y[-1]
    # outer v-scalings: v0e/sqrt(eps) -> Y^k d_Y^(k+1) v0e, v1e -> sqrt(eps) Y^k d_Y^(k+1) v1e
    pieces = {"u": (e0["u"], se * e1["u"], L0["u"] + se * L1["u"], 0),
              "v": (e0["v"], se * e1["v"], L0["v"] + se * L1["v"], 1)}
    sups = {}
    for name, (outer0, outer1, layer, shift) in pieces.items():
        for j in range(j_max + 1):
            for k in range(k_max + 1):
                outer = (_scaled_outer_derivative(outer0, fg, k, j, shift)
                         + _scaled_outer_derivative(outer1, fg, k, j, shift))
                total = S(outer) + _scaled_layer_derivative(layer, g, k, j, shift)
                top = float(np.abs(outer[:, above]).max()) if above.any() else 0.0
                sups[(name, k, j)] = max(float(np.abs(total).max()), top)
    passed = all(np.isfinite(v) for v in sups.values())
    return UniformBoundReport(min_us, sups, passed, g.eps)


def leading_layer(flow: EulerFlow, grid: TensorGrid, ub: float = 2.0, initial_layer=None) -> Prandtl0Layer:
    """Prandtl-0 layer driven by the wall traces of ``flow``."""
    from .prandtl0_solver import Prandtl0Problem, default_initial_layer, march_prandtl0
    d = flow.derivatives()
    ue, uex, veY = d["u"][:, 0], d["u_x"][:, 0], d["v_Y"][:, 0]
    layer0 = initial_layer or default_initial_layer(ub, ue[0], ue[0] * uex[0])
    prob = Prandtl0Problem(ue, uex, veY, np.zeros(grid.nx), ub, layer0)
    return march_prandtl0(prob, grid)


def first_euler_layer(flow: EulerFlow, p0: Prandtl0Layer) -> Euler1Layer:
    """Euler-1 corrector with well-prepared data matched to the layer's wall trace."""
    from .euler1_solver import canonical_problem, check_well_prepared, solve_phi1, wall_trace_from_layer
    trace = wall_trace_from_layer(p0.v0p.values[:, 0], p0.grid.x)
    problem = canonical_problem(flow.phiE, flow.vorticity, trace)
    check_well_prepared(problem)
    return solve_phi1(problem, flow.grid, flow)


def build_stack(flow: EulerFlow, grid: TensorGrid, ub: float = 2.0, gamma: float = 0.125,
                chi=None, e1: Euler1Layer | None = None, p0: Prandtl0Layer | None = None) -> LayerStack:
    """All four layers, the assembled profile, ``P2p`` and both residuals on ``grid``."""
    from .prandtl1_solver import ChiCutoff, build_prandtl1
    chi = chi or ChiCutoff()
    p0 = p0 if p0 is not None and p0.grid == grid else leading_layer(flow, grid, ub)
    e1 = e1 or first_euler_layer(flow, p0)
    p1 = build_prandtl1(flow, p0, e1, grid, chi)
    stack = assemble_profiles(flow, p0, e1, p1, gamma)
    stack.parts["chi"] = chi
    compute_P2p(stack)
    compute_residuals(stack)
    return stack
