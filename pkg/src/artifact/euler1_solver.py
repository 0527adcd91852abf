"""First Euler corrector in stream-function form.

``phi1`` solves ``-Lap phi1 = F'(phi0) phi1`` with wall trace
``phi1(x,0) = 1 + int_0^x v0p(x',0) dx'`` and prescribed inflow/outflow columns.
Velocities are ``u1e = phi1_Y`` and ``v1e = -phi1_x``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.integrate import cumulative_trapezoid

from .errors import NotWellPrepared, SingularOperator
from .euler0_builder import DirichletPoisson, EulerFlow
from .grid_core import ScalarField, TensorGrid, cumulative_from_top, d_axis, fd_weights


@dataclass
class Euler1Problem:
    fe_prime: Callable
    phi0: ScalarField
    wall_trace: np.ndarray
    phi1_0: Callable
    phi1_L: Callable
    prep_order: int = 2

    def validate(self, decay_tol: float = 1e-8) -> None:
        if abs(self.wall_trace[0] - 1.0) > 1e-12:
            raise ValueError("wall trace must equal 1 at x = 0")
        Ytop = self.phi0.grid.y[-1]
        for name, fn in (("phi1_0", self.phi1_0), ("phi1_L", self.phi1_L)):
            tail = np.abs(fn(np.linspace(0.8 * Ytop, Ytop, 20))).max()
            if tail > decay_tol:
                raise ValueError(f"{name} does not decay at the top of the Eulerian domain")


def wall_trace_from_layer(v0p_wall: np.ndarray, x) -> np.ndarray:
    """``1 + int_0^x v0p(x', 0) dx'`` by the trapezoidal rule."""
    return 1.0 + cumulative_trapezoid(v0p_wall, x, initial=0.0)


def _wall_second_derivative(trace, x, side):
    idx = np.arange(4) if side == 0 else np.arange(len(x) - 4, len(x))
    return float(fd_weights(x[idx[0] if side == 0 else idx[-1]], x[idx], 2) @ trace[idx])


def _data_second_derivative(fn, h=2.5e-3):
    pts = h * np.arange(7)
    return float(fd_weights(0.0, pts, 2) @ fn(pts))


def prepared_profile(value: float, curvature: float, width: float = 1.0) -> Callable:
    """``value * (1 + (b/2 + 1/w^2) Y^2) exp(-Y^2/w^2)`` with ``b = curvature / value``.

    The profile has the requested value and second derivative at ``Y = 0``;
    ``w`` sets its decay scale.
    """
    b = curvature / value
    a = 0.5 * b + 1.0 / width ** 2

    def prof(Y):
        Y = np.asarray(Y, dtype=float)
        return value * (1.0 + a * Y * Y) * np.exp(-(Y / width) ** 2)

    return prof


def wall_curvature_targets(wall_trace, x, fe_prime, phi0_wall=(0.0, 0.0)):
    """Values of ``phi1_YY`` at the two wall corners forced by the equation."""
    t0 = -_wall_second_derivative(wall_trace, x, 0) - fe_prime(np.array(phi0_wall[0]), 1) * wall_trace[0]
    tL = -_wall_second_derivative(wall_trace, x, 1) - fe_prime(np.array(phi0_wall[1]), 1) * wall_trace[-1]
    return float(t0), float(tL)


def canonical_problem(flow_phi0: ScalarField, fe_prime, wall_trace, prep_order=2,
                      width: float = 1.0) -> Euler1Problem:
    """Well-prepared inflow/outflow data built from the wall-curvature targets."""
    x = flow_phi0.grid.x
    p0 = flow_phi0.values[:, 0]
    t0, tL = wall_curvature_targets(wall_trace, x, fe_prime, (p0[0], p0[-1]))
    return Euler1Problem(fe_prime, flow_phi0, np.asarray(wall_trace, dtype=float),
                         prepared_profile(1.0, t0, width), prepared_profile(wall_trace[-1], tL, width),
                         prep_order)


def check_well_prepared(problem: Euler1Problem, tol: float = 1e-6) -> dict:
    """Compare the data's wall values and curvatures with those the equation forces."""
    x = problem.phi0.grid.x
    p0 = problem.phi0.values[:, 0]
    t0, tL = wall_curvature_targets(problem.wall_trace, x, problem.fe_prime, (p0[0], p0[-1]))
    mism = {
        0: (abs(float(problem.phi1_0(np.array(0.0))) - problem.wall_trace[0]),
            abs(float(problem.phi1_L(np.array(0.0))) - problem.wall_trace[-1])),
        2: (abs(_data_second_derivative(problem.phi1_0) - t0),
            abs(_data_second_derivative(problem.phi1_L) - tL)),
    }
    report = {"mismatch": mism, "targets": (t0, tL), "orders_checked": [0, 2],
              "note": "odd orders are unconstrained; orders above 2 are not checked"}
    for order in sorted(mism):
        if order > problem.prep_order:
            continue
        m = max(mism[order])
        if m > tol:
            raise NotWellPrepared(order, m)
    report["passed"] = True
    return report


@dataclass
class Euler1Layer:
    grid: TensorGrid
    phi1: ScalarField
    u1e: ScalarField
    v1e: ScalarField
    P1e: ScalarField
    corrector_B: ScalarField
    problem: Euler1Problem
    pressure_gradient: tuple | None = None
    _derivs: dict = field(default=None, repr=False)

    def derivatives(self) -> dict:
        if self._derivs is not None:
            return self._derivs
        g = self.grid
        dx = lambda a, k=1: d_axis(a, g.x, 0, k)
        dY = lambda a, k=1: d_axis(a, g.y, 1, k)
        p = self.phi1.values
        p_x, p_Y = dx(p), dY(p)
        p_xx, p_YY, p_xY = dx(p, 2), dY(p, 2), dY(p_x)
        d = {"u": p_Y, "u_x": p_xY, "u_Y": p_YY,
             "u_xx": dY(p_xx), "u_YY": dY(p_YY), "u_xY": dY(p_xY),
             "v": -p_x, "v_x": -p_xx, "v_Y": -p_xY,
             "v_xx": -dx(p_xx), "v_YY": -dY(p_xY), "v_xY": -dY(p_xx)}
        d["lap_u"] = d["u_xx"] + d["u_YY"]
        d["lap_v"] = d["v_xx"] + d["v_YY"]
        d["v_YYY"] = -dY(dY(p_xY))
        d["P"] = self.P1e.values
        if self.pressure_gradient is not None:
            # gradient read off the momentum equations rather than differenced
            d["P_x"], d["P_Y"] = self.pressure_gradient
        else:
            d["P_x"] = dx(self.P1e.values)
            d["P_Y"] = dY(self.P1e.values)
        self._derivs = d
        return d


def corrector(problem: Euler1Problem, grid: TensorGrid) -> np.ndarray:
    """Blend of the inflow/outflow columns scaled by the wall trace."""
    x, Y = grid.x, grid.y
    s = x / grid.L
    w = problem.wall_trace
    left = problem.phi1_0(Y)[None, :]
    right = (problem.phi1_L(Y) / w[-1])[None, :]
    return ((1 - s) * w)[:, None] * left + (s * w)[:, None] * right


def _momentum_terms(flow_d, e1_d):
    eq1 = (flow_d["u"] * e1_d["u_x"] + flow_d["u_x"] * e1_d["u"]
           + flow_d["v"] * e1_d["u_Y"] + e1_d["v"] * flow_d["u_Y"])
    eq2 = (flow_d["u"] * e1_d["v_x"] + e1_d["u"] * flow_d["v_x"]
           + flow_d["v"] * e1_d["v_Y"] + flow_d["v_Y"] * e1_d["v"])
    return eq1, eq2


def solve_phi1(problem: Euler1Problem, grid: TensorGrid, flow: EulerFlow | None = None,
               rhs: np.ndarray | None = None) -> Euler1Layer:
    """Solve for ``phi1`` with Dirichlet data given by the corrector ``B``.

    Subtracting ``B`` leaves a homogeneous problem for ``phi1 - B``; solving with
    ``B`` as boundary values is the same linear system.  ``rhs`` injects an
    extra source (used for manufactured solutions).
    """
    problem.validate()
    coeff = -problem.fe_prime(problem.phi0.values, 1)
    if np.max(-coeff) * grid.L ** 2 > 0.9 * np.pi ** 2:
        raise SingularOperator("F' too large: -Lap - F' may lose invertibility on this strip")
    try:
        solver = DirichletPoisson(grid, coeff)
    except RuntimeError as exc:  # singular factor
        raise SingularOperator(str(exc)) from exc
    B = corrector(problem, grid)
    bnd = np.zeros(grid.shape)
    bnd[0], bnd[-1] = B[0], B[-1]
    bnd[:, 0] = problem.wall_trace
    bnd[:, -1] = B[:, -1]
    phi = solver.solve(np.zeros(grid.shape) if rhs is None else rhs, bnd)
    u1 = d_axis(phi, grid.y, 1)
    v1 = -d_axis(phi, grid.x, 0)
    layer = Euler1Layer(grid, ScalarField(grid, phi), ScalarField(grid, u1), ScalarField(grid, v1),
                        ScalarField(grid, np.zeros(grid.shape)), ScalarField(grid, B), problem)
    if flow is not None:
        attach_pressure(layer, flow)
    return layer


def attach_pressure(layer: Euler1Layer, flow: EulerFlow) -> None:
    eq1, eq2 = _momentum_terms(flow.derivatives(), layer.derivatives())
    layer.P1e = ScalarField(layer.grid, pressure_by_quadrature(layer, flow))
    layer.pressure_gradient = (-eq1, -eq2)
    layer._derivs = None


def pressure_by_quadrature(layer: Euler1Layer, flow: EulerFlow) -> np.ndarray:
    """``P1e`` from the two momentum equations with gauge ``P1e(0, Y_max) = 0``."""
    g = layer.grid
    fd = flow.derivatives()
    ed = layer.derivatives()
    eq1, eq2 = _momentum_terms(fd, ed)
    P_inflow = cumulative_from_top(eq2[0], g.y)  # P_Y = -eq2
    return P_inflow[None, :] - cumulative_trapezoid(eq1, g.x, axis=0, initial=0.0)


def cross_check_momentum(layer: Euler1Layer, flow: EulerFlow, margin: int = 2) -> dict:
    """Both linearised momentum residuals, sampled away from the boundary rows."""
    fd = flow.derivatives()
    ed = layer.derivatives()
    g = layer.grid
    eq1, eq2 = _momentum_terms(fd, ed)
    r1 = eq1 + d_axis(layer.P1e.values, g.x, 0)
    r2 = eq2 + d_axis(layer.P1e.values, g.y, 1)
    sl = (slice(margin, -margin), slice(margin, -margin))
    return {"max_r1": float(np.abs(r1[sl]).max()), "max_r2": float(np.abs(r2[sl]).max()),
            "r1": r1, "r2": r2}
