"""Leading-order Prandtl layer in shifted variables, marched downstream in x.

Unknowns are ``ubar = u0e(x,0) + u0p`` and ``vbar = y v0eY(x,0) + v0p + v1e(x,0)``
satisfying

    ubar ubar_x + vbar ubar_y - ubar_yy = u0e(x,0) u0ex(x,0),   vbar_y = -ubar_x,

with ``ubar(x,0) = u_b`` and ``ubar -> u0e(x,0)`` at the top of the grid.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.special import erfc

from .errors import NonConvergence, PositivityLoss
from .grid_core import ScalarField, TensorGrid, d_axis, diff_matrix, trapz_weights


@dataclass
class Prandtl0Problem:
    """Wall traces of the Euler flows, wall speed and inflow layer profile."""

    ue_wall: np.ndarray
    ue_wall_x: np.ndarray
    ve_wall_Y: np.ndarray
    v1e_wall: np.ndarray
    ub: float
    initial_layer: Callable | np.ndarray

    def initial_values(self, y) -> np.ndarray:
        if callable(self.initial_layer):
            return np.asarray(self.initial_layer(y), dtype=float)
        return np.asarray(self.initial_layer, dtype=float)

    def validate(self, grid: TensorGrid, check_decay: bool = True) -> None:
        if self.ub <= 0:
            raise ValueError("wall speed u_b must be positive")
        if grid.nx < 4:
            raise ValueError("marching needs at least four x-stations")
        for name in ("ue_wall", "ue_wall_x", "ve_wall_Y", "v1e_wall"):
            if np.shape(getattr(self, name)) != (grid.nx,):
                raise ValueError(f"{name} must have one entry per x-node")
        u0 = self.initial_values(grid.y)
        if abs(u0[0] - (self.ub - self.ue_wall[0])) > 1e-10:
            raise ValueError("inflow layer is incompatible with the corner condition "
                             "u0p(0) = u_b - u0e(0,0)")
        if check_decay:
            scale = max(np.abs(u0).max(), 1e-300)
            envelope = np.abs(u0) * np.exp(grid.y / 2)
            if envelope.max() > 50 * scale:
                raise ValueError("inflow layer does not decay like exp(-y/2)")


def default_initial_layer(ub: float, ue0: float, forcing0: float) -> Callable:
    """Error-function layer with the wall curvature the equation demands at the corner.

    At ``(0, 0)`` the equation reduces to ``-ubar_yy = forcing0``.
    """
    jump = ub - ue0
    c = -0.5 * forcing0

    def layer(y):
        y = np.asarray(y, dtype=float)
        return jump * erfc(0.5 * y) + c * y * y * np.exp(-y)

    return layer


@dataclass
class Prandtl0Layer:
    grid: TensorGrid
    u0p: ScalarField
    v0p: ScalarField
    ubar: ScalarField
    vbar: ScalarField
    problem: Prandtl0Problem
    newton_iterations: list = field(default_factory=list)
    decay_report: dict | None = None

    @property
    def vbar_wall(self) -> np.ndarray:
        return self.vbar.values[:, 0]

    def mass_defect(self) -> np.ndarray:
        g = self.grid
        return march_dx(self.ubar.values, g.dx) + d_axis(self.vbar.values, g.y, 1)


def march_dx(values: np.ndarray, dx: float) -> np.ndarray:
    """x-derivative with the marching stencils.

    One-sided second order at ``x = 0``, centred at the first station (solved
    jointly with the second) and second-order backward differences after that.
    """
    f = np.asarray(values, dtype=float)
    out = np.empty_like(f)
    out[0] = (-3 * f[0] + 4 * f[1] - f[2]) / (2 * dx)
    out[1] = (f[2] - f[0]) / (2 * dx)
    out[2:] = (1.5 * f[2:] - 2 * f[1:-1] + 0.5 * f[:-2]) / dx
    return out


# rows: stations 1 and 2; columns: weights on u_0, u_1, u_2 (times 1/dx)
STARTUP_WEIGHTS = np.array([[-0.5, 0.0, 0.5], [0.5, -2.0, 1.5]])


def top_integration_matrix(y) -> np.ndarray:
    """Dense matrix ``T`` with ``(T f)_j = int_{y_j}^{y_max} f`` (trapezoid)."""
    n = len(y)
    h = np.diff(y)
    T = np.zeros((n, n))
    for j in range(n - 2, -1, -1):
        T[j] = T[j + 1]
        T[j, j] += 0.5 * h[j]
        T[j, j + 1] += 0.5 * h[j]
    return T


def wall_integration_matrix(y) -> np.ndarray:
    """Dense matrix ``W`` with ``(W f)_j = int_0^{y_j} f`` (trapezoid)."""
    n = len(y)
    h = np.diff(y)
    W = np.zeros((n, n))
    for j in range(1, n):
        W[j] = W[j - 1]
        W[j, j - 1] += 0.5 * h[j - 1]
        W[j, j] += 0.5 * h[j - 1]
    return W


def bdf_coefficients(n: int):
    """Second-order backward-difference weights on ``(u_n, u_{n-1}, u_{n-2})``, ``n >= 3``."""
    if n < 3:
        raise ValueError("stations 1 and 2 use the coupled start-up stencil")
    return (1.5, -2.0, 0.5)


def march_prandtl0(problem: Prandtl0Problem, grid: TensorGrid, tol: float = 1e-10,
                   max_iter: int = 50, extra_forcing: np.ndarray | None = None,
                   check_decay: bool = True, anchor: str = "wall") -> Prandtl0Layer:
    """March the shifted Prandtl system with Newton iterations at each x-station.

    The x-derivative uses the stencils of ``march_dx``: stations 1 and 2
    are solved as one coupled system, later stations by second-order
    backward differences.  At each station the nonlinear system, including the
    integral coupling ``vbar = vbar(y_max) + int_y^{y_max} ubar_x``, is solved by
    Newton's method on a dense Jacobian.

    ``anchor="wall"`` integrates ``vbar`` up from ``vbar(x,0) = 0``; the
    outer-flow trace ``v1e(x,0)`` is then read off at the top as
    ``vbar(y_max) - y_max v0eY(x,0)``, which is the fixed point of the
    trace iteration ``v1e(x,0) = -v0p(x,0)``.  ``anchor="top"`` uses the
    prescribed ``problem.v1e_wall`` instead.
    """
    if anchor not in ("wall", "top"):
        raise ValueError("anchor must be 'wall' or 'top'")
    problem.validate(grid, check_decay)
    x, y = grid.x, grid.y
    nx, ny = grid.shape
    dx = grid.dx
    Dy = diff_matrix(y, 1).toarray()
    Dyy = diff_matrix(y, 2).toarray()
    T = top_integration_matrix(y) if anchor == "top" else -wall_integration_matrix(y)
    forcing = problem.ue_wall * problem.ue_wall_x
    ub = np.empty((nx, ny))
    vb = np.empty((nx, ny))
    ub[0] = problem.ue_wall[0] + problem.initial_values(y)
    ub[0, 0] = problem.ub
    ub[0, -1] = problem.ue_wall[0]
    v_top = y[-1] * problem.ve_wall_Y + problem.v1e_wall if anchor == "top" else np.zeros(nx)
    inner = slice(1, ny - 1)
    m = ny - 2
    iters = []

    def rhs_at(n):
        return forcing[n] + (extra_forcing[n] if extra_forcing is not None else 0.0)

    # stations 1 and 2 are solved together so that the first x-derivative is centred
    U = np.array([ub[0].copy(), ub[0].copy()])
    for k, n in enumerate((1, 2)):
        U[k, 0], U[k, -1] = problem.ub, problem.ue_wall[n]
    C = STARTUP_WEIGHTS / dx
    for it in range(1, max_iter + 1):
        J = np.zeros((2 * m, 2 * m))
        res = np.zeros(2 * m)
        for k, n in enumerate((1, 2)):
            u = U[k]
            ux = C[k, 0] * ub[0] + C[k, 1] * U[0] + C[k, 2] * U[1]
            v = v_top[n] + T @ ux
            uy = Dy @ u
            res[k * m:(k + 1) * m] = (u * ux + v * uy - Dyy @ u - rhs_at(n))[inner]
            own = np.diag(ux) + v[:, None] * Dy - Dyy
            for l in range(2):
                blk = C[k, l + 1] * (np.diag(u) + uy[:, None] * T) + (own if l == k else 0.0)
                J[k * m:(k + 1) * m, l * m:(l + 1) * m] = blk[inner, inner]
        step = np.linalg.solve(J, -res)
        U[0, inner] += step[:m]
        U[1, inner] += step[m:]
        if np.max(np.abs(step)) < tol:
            break
    else:
        raise NonConvergence("Prandtl-0 start-up stations", max_iter, float(np.max(np.abs(step))))
    iters += [it, it]
    for k, n in enumerate((1, 2)):
        if U[k].min() <= 0:
            raise PositivityLoss(f"Prandtl-0 at x={x[n]:.4g}", float(U[k].min()))
        ub[n] = U[k]
    for n in (1, 2):
        k = n - 1
        vb[n] = v_top[n] + T @ (C[k, 0] * ub[0] + C[k, 1] * ub[1] + C[k, 2] * ub[2])

    for n in range(3, nx):
        a0, a1, a2 = bdf_coefficients(n)
        hist = a1 * ub[n - 1] + a2 * ub[n - 2]
        rhs = rhs_at(n)
        u = ub[n - 1].copy()
        u[0], u[-1] = problem.ub, problem.ue_wall[n]
        for it in range(1, max_iter + 1):
            ux = (a0 * u + hist) / dx
            v = v_top[n] + T @ ux
            uy = Dy @ u
            res = u * ux + v * uy - Dyy @ u - rhs
            J = (np.diag(ux + a0 / dx * u) + (a0 / dx) * uy[:, None] * T
                 + v[:, None] * Dy - Dyy)
            step = np.linalg.solve(J[inner, inner], -res[inner])
            u[inner] += step
            if np.max(np.abs(step)) < tol:
                break
        else:
            raise NonConvergence(f"Prandtl-0 station x={x[n]:.4g}", max_iter,
                                 float(np.max(np.abs(step))))
        iters.append(it)
        if u.min() <= 0:
            raise PositivityLoss(f"Prandtl-0 at x={x[n]:.4g}", float(u.min()))
        ub[n] = u
        vb[n] = v_top[n] + T @ ((a0 * u + hist) / dx)
    ux0 = (-3 * ub[0] + 4 * ub[1] - ub[2]) / (2 * dx)
    vb[0] = v_top[0] + T @ ux0
    if ub.min() <= 0:
        raise PositivityLoss("Prandtl-0", float(ub.min()))
    if anchor == "wall":
        problem = replace(problem, v1e_wall=vb[:, -1] - y[-1] * problem.ve_wall_Y)
    u0p = ub - problem.ue_wall[:, None]
    v0p = vb - y[None, :] * problem.ve_wall_Y[:, None] - problem.v1e_wall[:, None]
    return Prandtl0Layer(grid, ScalarField(grid, u0p), ScalarField(grid, v0p),
                         ScalarField(grid, ub), ScalarField(grid, vb), problem, iters)


def _decay_table(layer: Prandtl0Layer, M: int, K: int) -> dict:
    g = layer.grid
    wy = trapz_weights(g.y)
    out = {}
    for name, f in (("u0p", layer.u0p.values), ("v0p", layer.v0p.values)):
        xd = [f]
        for j in range(1, K + 1):
            xd.append(d_axis(xd[-1], g.x, 0))
        for j in range(K + 1):
            a = xd[j]
            for k in range(K + 1 - j):
                val = np.sqrt((a * g.y[None, :] ** M) ** 2 @ wy)
                out[(name, j, k)] = float(val.max())
                a = d_axis(a, g.y, 1)
    return out


def check_decay(layer: Prandtl0Layer, M: int = 2, K: int = 2,
                reference: Prandtl0Layer | None = None, factor: float = 2.0) -> dict:
    """Tabulate ``sup_x ||y^M d_x^j d_y^k {u0p, v0p}||_{L2_y}`` for ``j + k <= K``.

    When a ``reference`` layer computed with a larger ``y_max`` is supplied the
    two tables are compared and entries changing by more than ``factor`` fail.
    """
    table = _decay_table(layer, M, K)
    passed = all(np.isfinite(v) for v in table.values())
    ratios = {}
    if reference is not None:
        ref = _decay_table(reference, M, K)
        for key, v in table.items():
            r = ref[key]
            scale = max(abs(v), abs(r))
            if scale < 1e-14:
                ratios[key] = 1.0
            else:
                ratios[key] = r / v if v != 0 else np.inf
            if not (1.0 / factor <= ratios[key] <= factor):
                passed = False
    report = {"table": table, "ratios": ratios, "passed": passed, "M": M, "K": K}
    layer.decay_report = report
    return report
