"""First-order Prandtl layer: forcing, homogenisation, linear march and cutoff.

The homogenised unknowns ``u = u1p + chi(y) u1e(x,0)`` and
``v = v1p + u1ex(x,0) I_chi(y)`` vanish at the wall and satisfy

    u0 u_x + u0_x u + v0 u_y + u0_y v - u_yy = H1 - F1,   v = -int_0^y u_x,

with ``u0 = ubar`` and ``v0 = vbar`` taken from the leading-order layer.  The
forcing enters with a minus sign: every term collected in ``F1`` appears with a
plus sign in the x-momentum residual, so the layer has to cancel it.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .euler0_builder import EulerFlow
from .euler1_solver import Euler1Layer
from .grid_core import (ScalarField, TensorGrid, cumulative_from_top, cumulative_from_wall, d_axis,
                        diff_matrix, integrate, trapz_weights)
from .outer_sampling import OuterSampler
from .prandtl0_solver import STARTUP_WEIGHTS, Prandtl0Layer, bdf_coefficients, march_dx, wall_integration_matrix
from .smooth import Bump, Plateau, _gauss


class ChiCutoff:
    """``chi = plateau - c * bump`` with ``c`` chosen so that ``chi`` has zero mean.

    The plateau equals 1 on ``[0, 1]`` and vanishes beyond 2; the bump lives on
    ``[3, 4]``, so ``chi`` is identically 1 near the wall.
    """

    def __init__(self, plateau=(1.0, 2.0), bump=(3.0, 4.0)):
        if bump[0] < plateau[1]:
            raise ValueError("the bump must sit beyond the plateau")
        self.eta = Plateau(*plateau)
        self.zeta = Bump(*bump)
        self.c = float(self.eta.tail_integral(np.array(0.0))) / self.zeta.mass
        self.support = float(bump[1])

    def __call__(self, y, n: int = 0):
        return self.eta(y, n) - self.c * self.zeta(y, n)

    def integral_from(self, y):
        """``I_chi(y) = int_y^inf chi``."""
        y = np.asarray(y, dtype=float)
        return self.eta.tail_integral(y) - self.c * (self.zeta.mass - self.zeta.integral(y))

    def admissibility(self) -> dict:
        """Independent Gauss quadrature of the mean and the wall derivatives."""
        a, b = self.eta.a, self.eta.b
        za, zb = self.zeta.a, self.zeta.b
        mean = (float(_gauss(lambda s: self(s), 0.0, a)) + float(_gauss(lambda s: self(s), a, b))
                + float(_gauss(lambda s: self(s), za, zb)))
        derivs = {k: float(self(np.array(0.0), k)) for k in range(1, 5)}
        return {"value_at_0": float(self(np.array(0.0))), "mean": mean, "wall_derivatives": derivs}


@dataclass
class Prandtl1Layer:
    u1p: ScalarField
    v1p: ScalarField
    u_hom: ScalarField
    v_hom: ScalarField
    F1: ScalarField
    H1: ScalarField
    Rup: ScalarField
    up: ScalarField
    vp: ScalarField
    report: dict = field(default_factory=dict)


def wall_traces(e1: Euler1Layer):
    """``u1e(x,0)`` and its x-derivative taken with the marching stencil."""
    u1e0 = e1.derivatives()["u"][:, 0].copy()
    return u1e0, march_dx(u1e0, e1.grid.dx)


def assemble_F1(flow: EulerFlow, p0: Prandtl0Layer, e1: Euler1Layer, grid: TensorGrid,
                return_terms: bool = False):
    """Forcing of the first-order layer with difference quotients in integral form.

    ``(v0e/sqrt(eps) - y v0eY(x,0)) / sqrt(eps)`` is evaluated as
    ``y^2 int_0^1 (1-t) v0eYY(x, tY) dt`` and ``(u0e - u0e(x,0)) / sqrt(eps)`` as
    ``y int_0^1 u0eY(x, tY) dt``, so no small differences are divided by
    ``sqrt(eps)``.
    """
    eps = grid.eps
    se = np.sqrt(eps)
    y = grid.y[None, :]
    S = OuterSampler(flow.grid, grid)
    fd = flow.derivatives()
    ed = e1.derivatives()
    u0p = p0.u0p.values
    v0p = p0.v0p.values
    u0px = march_dx(u0p, grid.dx)
    u0py = d_axis(u0p, grid.y, 1)
    terms = {
        "v0p_shear": v0p * (S(fd["u_Y"]) + se * S(ed["u_Y"])),
        "v0e_taylor": y ** 2 * S.taylor_remainder(fd["v_YY"]) * u0py,
        "v1e_slope": y * ed["v_Y"][:, :1] * u0py,
        "u0e_diff": y * S.mean_slope(fd["u_Y"]) * u0px,
        "u0ex_diff": y * S.mean_slope(fd["u_xY"]) * u0p,
        "u1e_coupling": u0p * S(ed["u_x"]) + S(ed["u"]) * u0px,
    }
    F1 = ScalarField(grid, sum(terms.values()))
    return (F1, terms) if return_terms else F1


def homogenization_forcing(p0: Prandtl0Layer, traces, chi: ChiCutoff) -> np.ndarray:
    """Extra forcing created by shifting the wall data with ``chi``."""
    g = p0.grid
    u1e0, u1ex0 = (t[:, None] for t in traces)
    ub, vb = p0.ubar.values, p0.vbar.values
    ub_x = march_dx(ub, g.dx)
    ub_y = d_axis(ub, g.y, 1)
    y = g.y[None, :]
    return (ub * chi(y) * u1ex0 + ub_x * chi(y) * u1e0 + vb * chi(y, 1) * u1e0
            + ub_y * chi.integral_from(y) * u1ex0 - chi(y, 2) * u1e0)


def first_order_operator(u, v, p0: Prandtl0Layer):
    """``ubar u_x + ubar_x u + vbar u_y + ubar_y v - u_yy`` with the marching stencils."""
    g = p0.grid
    ub, vb = p0.ubar.values, p0.vbar.values
    return (ub * march_dx(u, g.dx) + march_dx(ub, g.dx) * u + vb * d_axis(u, g.y, 1)
            + d_axis(ub, g.y, 1) * v - d_axis(u, g.y, 1, 2))


def march_prandtl1(forcing: np.ndarray, p0: Prandtl0Layer, grid: TensorGrid,
                   initial: np.ndarray | None = None):
    """March the linear homogenised system with the same stencils as the leading order.

    ``forcing`` is ``H1 - F1``.  Returns ``(u, v)`` with ``v = -int_0^y u_x``.
    """
    nx, ny = grid.shape
    dx = grid.dx
    y = grid.y
    Dy = diff_matrix(y, 1).toarray()
    Dyy = diff_matrix(y, 2).toarray()
    W = wall_integration_matrix(y)
    ub, vb = p0.ubar.values, p0.vbar.values
    ub_x = march_dx(ub, dx)
    ub_y = d_axis(ub, y, 1)
    u = np.zeros((nx, ny))
    if initial is not None:
        u[0] = initial
        u[0, 0] = u[0, -1] = 0.0
    inner = slice(1, ny - 1)
    m = ny - 2

    def own(n):
        return np.diag(ub_x[n]) + vb[n][:, None] * Dy - Dyy

    def coupling(n):
        return np.diag(ub[n]) - ub_y[n][:, None] * W

    # coupled start-up: centred difference at station 1, BDF2 at station 2
    C = STARTUP_WEIGHTS / dx
    A = np.zeros((2 * m, 2 * m))
    rhs = np.zeros(2 * m)
    for k, n in enumerate((1, 2)):
        for l in range(2):
            blk = C[k, l + 1] * coupling(n) + (own(n) if l == k else 0.0)
            A[k * m:(k + 1) * m, l * m:(l + 1) * m] = blk[inner, inner]
        rhs[k * m:(k + 1) * m] = (forcing[n] - C[k, 0] * coupling(n) @ u[0])[inner]
    sol = np.linalg.solve(A, rhs)
    u[1, inner], u[2, inner] = sol[:m], sol[m:]
    for n in range(3, nx):
        a0, a1, a2 = bdf_coefficients(n)
        hist = (a1 * u[n - 1] + a2 * u[n - 2]) / dx
        An = own(n) + (a0 / dx) * coupling(n)
        rhs = forcing[n] - coupling(n) @ hist
        u[n, inner] = np.linalg.solve(An[inner, inner], rhs[inner])
    v = -cumulative_from_wall(march_dx(u, dx), y)
    return u, v


def cutoff_remainder(up, vp, I, F1, p0: Prandtl0Layer, chi: ChiCutoff, eps: float) -> np.ndarray:
    """Error made by truncating the layer, with ``I = -int_0^y up`` (so ``I_x = vp``).

    Equals ``L(u1p, v1p) + F1`` when the untruncated fields solve ``L = -F1``.
    """
    g = p0.grid
    se = np.sqrt(eps)
    z = se * g.y[None, :]
    c0, c1, c2, c3 = (chi(z, k) for k in range(4))
    ub, vb = p0.ubar.values, p0.vbar.values
    ub_x = march_dx(ub, g.dx)
    up_y = d_axis(up, g.y, 1)
    return ((1 - c0) * F1 - se * ub * c1 * vp - se * ub_x * c1 * I
            + 2 * se * vb * c1 * up - eps * vb * c2 * I
            - 3 * se * c1 * up_y - 3 * eps * c2 * up + eps * se * c3 * I)


def cutoff_remainder_display(up, vp, F1, p0: Prandtl0Layer, chi: ChiCutoff, eps: float) -> np.ndarray:
    """The eight-term cutoff error transcribed with the tail integral ``int_y^inf up``.

    Kept for comparison only; see ``apply_cutoff`` for the version used downstream.
    """
    g = p0.grid
    se = np.sqrt(eps)
    z = se * g.y[None, :]
    c0, c1, c2, c3 = (chi(z, k) for k in range(4))
    J = cumulative_from_top(up, g.y)
    ub, vb = p0.ubar.values, p0.vbar.values
    ub_x = march_dx(ub, g.dx)
    up_y = d_axis(up, g.y, 1)
    return ((1 - c0) * F1 + se * ub * c1 * vp - se * ub_x * c1 * J
            + 2 * se * vb * c1 * up - eps * vb * c2 * J + 3 * se * c1 * up_y
            + 3 * eps * c2 * up - eps * se * c3 * J)


def discrete_lift(traces, chi: ChiCutoff, grid: TensorGrid):
    """Wall-data lift ``(chi(y) u1e(x,0), -int_0^y d_x(chi u1e(x,0)))`` on the grid.

    The vertical part uses the same quadrature and x-stencil as the march, so the
    lift satisfies the discrete continuity equation exactly.  Since ``chi`` has
    zero mean it approximates ``u1ex(x,0) I_chi(y)``.
    """
    u1e0 = traces[0][:, None]
    ul = chi(grid.y)[None, :] * u1e0
    vl = -cumulative_from_wall(march_dx(ul, grid.dx), grid.y)
    return ul, vl


def apply_cutoff(u_hom, v_hom, chi: ChiCutoff, eps: float, p0: Prandtl0Layer, traces,
                 F1: np.ndarray, H1: np.ndarray | None = None) -> Prandtl1Layer:
    """Undo the homogenisation and truncate the layer at ``y ~ 1/sqrt(eps)``.

    ``u1p = chi(sqrt(eps) y) up + sqrt(eps) chi'(sqrt(eps) y) int_0^y up``; ``v1p`` is
    recovered from continuity and agrees with ``chi(sqrt(eps) y) vp`` up to
    quadrature error (reported).
    """
    g = p0.grid
    y = g.y[None, :]
    ul, vl = discrete_lift(traces, chi, g)
    up = u_hom - ul
    vp = v_hom - vl
    se = np.sqrt(eps)
    z = se * y
    I = -cumulative_from_wall(up, g.y)
    u1p = chi(z) * up - se * chi(z, 1) * I
    v1p = -cumulative_from_wall(march_dx(u1p, g.dx), g.y)
    Rup = cutoff_remainder(up, vp, I, F1, p0, chi, eps)
    direct = first_order_operator(u1p, v1p, p0) + F1
    display = cutoff_remainder_display(up, vp, F1, p0, chi, eps)
    interior = (slice(2, None), slice(1, -1))
    scale = max(np.abs(F1[interior]).max(), 1e-300)
    report = {
        "direct_mismatch": float(np.abs((Rup - direct)[interior]).max()) / scale,
        "display_mismatch": float(np.abs((display - direct)[interior]).max()) / scale,
        "v1p_vs_chi_vp": float(np.abs(v1p - chi(z) * vp).max()),
        "divergence_fd": float(np.abs((march_dx(u1p, g.dx) + d_axis(v1p, g.y, 1))[:, 1:-1]).max()),
        "wall_u": float(np.abs(up[:, 0] + traces[0]).max()),
        "wall_v": float(np.abs(v1p[:, 0]).max()),
    }
    if H1 is not None:
        Hd = first_order_operator(ul, vl, p0)
        report["H1_display_vs_discrete"] = float(np.abs((H1 - Hd)[interior]).max())
    mk = lambda a: ScalarField(g, a)
    return Prandtl1Layer(mk(u1p), mk(v1p), mk(u_hom), mk(v_hom), mk(F1),
                         mk(np.zeros(g.shape) if H1 is None else H1), mk(Rup), mk(up), mk(vp), report)


def cutoff_norm(layer: Prandtl1Layer, p0: Prandtl0Layer, chi: ChiCutoff, eps: float,
                n_tail: int = 4000) -> dict:
    """``||Rup||_{L2} + ||y Rup_y||_{L2}`` over the half line ``y > 0``.

    Beyond ``y_max`` the untruncated layer has converged (``up = 0``, ``vp`` and
    ``int_0^y up`` constant, ``vbar`` linear), so the cutoff error there is
    evaluated in closed form on a fine uniform tail grid.
    """
    g = p0.grid
    R = layer.Rup.values
    yR_y = g.y[None, :] * d_axis(R, g.y, 1)
    grid_sq = (integrate(R ** 2, g), integrate(yR_y ** 2, g))
    se = np.sqrt(eps)
    y_end = chi.support / se
    tail_sq = (0.0, 0.0)
    if y_end > g.y[-1]:
        yt = np.linspace(g.y[-1], y_end, n_tail)[None, :]
        z = se * yt
        c1, c2, c3, c4 = (chi(z, k) for k in range(1, 5))
        vp = layer.vp.values[:, -1:]
        I = -cumulative_from_wall(layer.up.values, g.y)[:, -1:]
        ue = p0.ubar.values[:, -1:]
        uex = march_dx(p0.ubar.values, g.dx)[:, -1:]
        vY = p0.problem.ve_wall_Y[:, None]
        vb = yt * vY + p0.problem.v1e_wall[:, None]
        Rt = -se * ue * c1 * vp - se * uex * c1 * I - eps * vb * c2 * I + eps * se * c3 * I
        Rt_y = (-eps * ue * c2 * vp - eps * uex * c2 * I
                - eps * (vY * c2 + se * vb * c3) * I + eps * eps * c4 * I)
        wx = trapz_weights(g.x)
        wt = trapz_weights(yt[0])
        tail_sq = (float(wx @ (Rt ** 2) @ wt), float(wx @ ((yt * Rt_y) ** 2) @ wt))
    l2 = np.sqrt(grid_sq[0] + tail_sq[0])
    wl2 = np.sqrt(grid_sq[1] + tail_sq[1])
    return {"L2": float(l2), "weighted": float(wl2), "total": float(l2 + wl2),
            "grid_part": float(np.sqrt(grid_sq[0]) + np.sqrt(grid_sq[1])),
            "tail_part": float(np.sqrt(tail_sq[0]) + np.sqrt(tail_sq[1]))}


def canonical_initial(chi: ChiCutoff, u1e00: float, forcing00: float = 0.0, forcing_y00: float = 0.0):
    """``u1p(0, y) = -u1e(0,0) chi(y) + (a y^2 + b y^3) exp(-y)``.

    At the wall the march reduces to ``-u_yy = f`` and ``-u_yyy = f_y``; ``a`` and
    ``b`` give the homogenised inflow data exactly that curvature and third
    derivative at the corner.
    """
    a = -0.5 * forcing00
    b = a - forcing_y00 / 6.0

    def initial(y):
        y = np.asarray(y, dtype=float)
        return -u1e00 * chi(y) + (a + b * y) * y * y * np.exp(-y)

    return initial


def build_prandtl1(flow: EulerFlow, p0: Prandtl0Layer, e1: Euler1Layer, grid: TensorGrid,
                   chi: ChiCutoff | None = None, u1p0=None) -> Prandtl1Layer:
    """Forcing, homogenisation, march and cutoff in one call.

    The march is driven by the discrete image of the lift, which makes the
    homogenisation exact on the grid; the closed-form ``H1`` is kept for the
    consistency report.  Without ``u1p0`` the inflow data is
    ``canonical_initial`` with corner-compatible wall derivatives.
    """
    chi = chi or ChiCutoff()
    traces = wall_traces(e1)
    F1 = assemble_F1(flow, p0, e1, grid).values
    H1 = homogenization_forcing(p0, traces, chi)
    ul, vl = discrete_lift(traces, chi, grid)
    forcing = -F1 + first_order_operator(ul, vl, p0)
    if u1p0 is None:
        f_y = d_axis(forcing[:1], grid.y, 1)[0, 0]
        u1p0 = canonical_initial(chi, float(traces[0][0]), float(forcing[0, 0]), float(f_y))
    initial = u1p0(grid.y) + ul[0]
    u_hom, v_hom = march_prandtl1(forcing, p0, grid, initial)
    return apply_cutoff(u_hom, v_hom, chi, grid.eps, p0, traces, F1, H1)


def energy_ratio(u_hom: np.ndarray, grid: TensorGrid, L_factor: float = 1.0) -> dict:
    """Both sides of ``sup_x |u|^2 + |u_y|^2 <= C + O(L) |u_x|^2`` with ``C = |u(0)|^2``."""
    wy = trapz_weights(grid.y)
    lhs = float(np.max((u_hom ** 2) @ wy)) + integrate(d_axis(u_hom, grid.y, 1) ** 2, grid)
    rhs = float(u_hom[0] ** 2 @ wy) + L_factor * grid.L * integrate(march_dx(u_hom, grid.dx) ** 2, grid)
    return {"lhs": lhs, "rhs": rhs, "ratio": lhs / rhs if rhs > 0 else np.inf}
