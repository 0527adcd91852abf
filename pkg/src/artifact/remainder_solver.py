"""Remainder problem: inflow homogenisation, MAC discretisation and the Picard loop.

The remainder ``(u, v, P)`` multiplies ``eps^(1/2+gamma)`` in the Navier-Stokes
solution.  Substituting into the scaled equations gives

    -Lap_eps u + S^u(u, v) + P_x      = -eps^(-1/2-gamma) R^{u,1} - N^u(u, v)
    -Lap_eps v + S^v(u, v) + P_y/eps  = -eps^(-1/2-gamma) R^{v,1} - N^v(u, v)
    u_x + v_y = 0

with Dirichlet data on ``x = 0`` and the stress conditions at ``x = L``.
``Lap_eps = d_yy + eps d_xx``.  After subtracting the lift ``(u0, v0)`` of the
inflow data the unknowns vanish on ``x = 0``, ``y = 0`` and ``y = y_max``.

Staggering: ``u`` sits at ``(x_i, ym_j)``, ``v`` at ``(xm_i, y_j)``, ``P`` at
``(xm_i, ym_j)``, where ``xm``/``ym`` are cell midpoints of the layer grid.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import NoContraction, PositivityLoss, SingularSystem, SolveFailure, UnsupportedData
from .estimate_auditor import compute_X_norm
from .grid_core import ScalarField, TensorGrid, fd_weights
from .smooth import Bump, Plateau

Profile = Callable[..., np.ndarray]


def zero_profile(y, n: int = 0):
    return np.zeros_like(np.asarray(y, dtype=float))


# ---------------------------------------------------------------------------
# boundary data and the inflow lift

@dataclass(frozen=True)
class BoundaryData:
    """Inflow traces ``a0, b0`` and outflow stress data ``aL, bL``.

    Each entry is a callable ``f(y, n)`` returning the ``n``-th y-derivative.
    """

    a0: Profile = zero_profile
    b0: Profile = zero_profile
    aL: Profile = zero_profile
    bL: Profile = zero_profile
    N: int = 4

    def validate(self, y, eps: float, k_max: int = 4, tol: float = 1e-14) -> dict:
        """Check the support condition and return the decay constants per entry."""
        y = np.asarray(y, dtype=float)
        weight = (1.0 + y ** 2) ** (self.N / 2)
        near = y < 1.0
        consts = {}
        for name in ("a0", "b0", "aL", "bL"):
            fn = getattr(self, name)
            c = 0.0
            for k in range(k_max + 1):
                vals = np.asarray(fn(y, k), dtype=float)
                if np.any(np.abs(vals[near]) > tol):
                    raise UnsupportedData(f"{name} (derivative {k}) is nonzero below y = 1")
                c = max(c, float(np.max(np.abs(vals) * weight)))
            consts[name] = c / np.sqrt(eps) if name == "aL" else c
        return consts

    @property
    def is_zero(self) -> bool:
        return all(getattr(self, n) is zero_profile for n in ("a0", "b0", "aL", "bL"))


def canonical_boundary_data(eps: float | None = None) -> BoundaryData:
    """Zero remainder data: the Navier-Stokes solution takes the profile's own boundary traces."""
    return BoundaryData()


def bump_boundary_data(eps: float) -> BoundaryData:
    """Bumps on ``[2, 10]`` (resolved by the default stretched grids); ``aL`` carries the ``sqrt(eps)`` size."""
    return BoundaryData(a0=Bump(2.0, 10.0, 0.5), b0=Bump(2.0, 10.0, 0.2),
                        aL=Bump(2.0, 10.0, 0.5 * np.sqrt(eps)), bL=Bump(2.0, 10.0, 0.2))


@dataclass(frozen=True)
class SolverOptions:
    """Linear-solver and Picard settings.

    ``alpha > 0`` adds the weighted regulariser
    ``-alpha d_y{<y>^2m chi1 (10 u_y, 2 v_y)} - alpha d_x{<y>^2m chi1 (u_y + eps v_x)}``.
    """

    alpha: float = 0.0
    m: int = 1
    damping: float = 1.0
    tol: float = 1e-9
    max_iter: int = 60
    residual_tol: float = 1e-8

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")


# ---------------------------------------------------------------------------
# staggered grid

class MacGrid:
    """Staggered locations derived from the nodes of a layer grid."""

    def __init__(self, grid: TensorGrid):
        self.grid = grid
        self.x, self.y = grid.x, grid.y
        self.nx, self.ny = grid.nx, grid.ny
        self.dx = grid.dx
        self.xm = 0.5 * (self.x[1:] + self.x[:-1])
        self.ym = 0.5 * (self.y[1:] + self.y[:-1])
        self.hy = np.diff(self.y)
        self.u_shape = (self.nx, self.ny - 1)
        self.v_shape = (self.nx - 1, self.ny)
        self.p_shape = (self.nx - 1, self.ny - 1)
        self.nu = self.nx * (self.ny - 1)
        self.nv = (self.nx - 1) * self.ny
        self.np = (self.nx - 1) * (self.ny - 1)

    @property
    def size(self) -> int:
        return self.nu + self.nv + self.np

    def split(self, z):
        u = z[: self.nu].reshape(self.u_shape)
        v = z[self.nu: self.nu + self.nv].reshape(self.v_shape)
        P = z[self.nu + self.nv:].reshape(self.p_shape)
        return u, v, P

    @staticmethod
    def join(u, v, P=None):
        parts = [np.ravel(u), np.ravel(v)]
        if P is not None:
            parts.append(np.ravel(P))
        return np.concatenate(parts)

    # nodal arrays -> staggered locations (linear, exact midpoints)
    def nodes_to_u(self, a):
        return 0.5 * (a[:, 1:] + a[:, :-1])

    def nodes_to_v(self, a):
        return 0.5 * (a[1:] + a[:-1])

    def nodes_to_p(self, a):
        return self.nodes_to_u(self.nodes_to_v(a))

    def u_points(self):
        return np.meshgrid(self.x, self.ym, indexing="ij")

    def v_points(self):
        return np.meshgrid(self.xm, self.y, indexing="ij")

    def p_points(self):
        return np.meshgrid(self.xm, self.ym, indexing="ij")

    # staggered -> nodes, using the homogeneous Dirichlet values
    def u_to_nodes(self, u):
        out = np.zeros((self.nx, self.ny))
        w = (self.y[1:-1] - self.ym[:-1]) / (self.ym[1:] - self.ym[:-1])
        out[:, 1:-1] = (1 - w) * u[:, :-1] + w * u[:, 1:]
        return out

    def v_to_nodes(self, v):
        out = np.zeros((self.nx, self.ny))
        out[1:-1] = 0.5 * (v[1:] + v[:-1])
        out[-1] = 1.5 * v[-1] - 0.5 * v[-2]
        return out

    def u_values_to_nodes(self, a):
        """Like :meth:`u_to_nodes` but extrapolating to the wall and the top (for forcing)."""
        out = self.u_to_nodes(a)
        y, ym = self.y, self.ym
        out[:, 0] = a[:, 0] + (y[0] - ym[0]) * (a[:, 1] - a[:, 0]) / (ym[1] - ym[0])
        out[:, -1] = a[:, -1] + (y[-1] - ym[-1]) * (a[:, -1] - a[:, -2]) / (ym[-1] - ym[-2])
        return out

    def v_values_to_nodes(self, a):
        out = self.v_to_nodes(a)
        out[0] = 1.5 * a[0] - 0.5 * a[1]
        return out

    def p_to_nodes(self, P):
        """Bilinear extension of cell-centred values (linear extrapolation at the edges)."""
        xm, x = self.xm, self.x
        lo = P[0] + (x[0] - xm[0]) * (P[1] - P[0]) / (xm[1] - xm[0])
        hi = P[-1] + (x[-1] - xm[-1]) * (P[-1] - P[-2]) / (xm[-1] - xm[-2])
        cx = np.concatenate([lo[None], 0.5 * (P[1:] + P[:-1]), hi[None]])
        wy = (self.y[1:-1] - self.ym[:-1]) / (self.ym[1:] - self.ym[:-1])
        out = np.empty((self.nx, self.ny))
        out[:, 1:-1] = (1 - wy) * cx[:, :-1] + wy * cx[:, 1:]
        out[:, 0] = cx[:, 0] + (self.y[0] - self.ym[0]) * (cx[:, 1] - cx[:, 0]) / (self.ym[1] - self.ym[0])
        out[:, -1] = cx[:, -1] + (self.y[-1] - self.ym[-1]) * (cx[:, -1] - cx[:, -2]) / (self.ym[-1] - self.ym[-2])
        return out


def _three_point(coords, order, lo=None, hi=None):
    """1-D stencil matrix on ``coords``; ``lo``/``hi`` are coordinates of zero ghost values.

    Without a ghost the end rows use one-sided three-point stencils.
    """
    n = len(coords)
    rows, cols, vals = [], [], []
    for i in range(n):
        pts, idx = [], []
        for k in (i - 1, i, i + 1):
            if 0 <= k < n:
                pts.append(coords[k])
                idx.append(k)
            elif k < 0 and lo is not None:
                pts.append(lo)
                idx.append(-1)
            elif k >= n and hi is not None:
                pts.append(hi)
                idx.append(-1)
        if len(pts) < 3:
            idx = list(range(0, 3)) if i == 0 else list(range(n - 3, n))
            pts = [coords[k] for k in idx]
        w = fd_weights(coords[i], pts, order)
        for k, wk in zip(idx, w):
            if k >= 0:
                rows.append(i)
                cols.append(k)
                vals.append(wk)
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def _entry(shape, i, j, val=1.0):
    return sp.csr_matrix(([val], ([i], [j])), shape=shape)


class MacOperators:
    """Sparse difference, interpolation and divergence operators on a :class:`MacGrid`."""

    def __init__(self, mac: MacGrid):
        self.mac = mac
        nx, ny, dx = mac.nx, mac.ny, mac.dx
        x, y, xm, ym = mac.x, mac.y, mac.xm, mac.ym
        Iu_y, Iv_y = sp.identity(ny - 1), sp.identity(ny)
        Iu_x, Iv_x = sp.identity(nx), sp.identity(nx - 1)
        kron = lambda a, b: sp.kron(a, b, format="csr")
        # u: nodes in x, midpoints in y with zero ghosts at the wall and the top
        self.Dx_u = kron(_three_point(x, 1), Iu_y)
        self.Dxx_u = kron(_three_point(x, 2), Iu_y)
        self.Dy_u = kron(Iu_x, _three_point(ym, 1, lo=y[0], hi=y[-1]))
        self.Dyy_u = kron(Iu_x, _three_point(ym, 2, lo=y[0], hi=y[-1]))
        # v: midpoints in x with a zero ghost at x = 0, nodes in y
        Dxx_v = _three_point(xm, 2, lo=x[0]).tolil()
        Dxx_v[nx - 2, :] = 0.0
        Dxx_v[nx - 2, nx - 3] = 1.0 / dx ** 2     # outflow flux supplied by the stress row
        Dxx_v[nx - 2, nx - 2] = -1.0 / dx ** 2
        self.Dx_v = kron(_three_point(xm, 1, lo=x[0]), Iv_y)
        self.Dxx_v = kron(Dxx_v.tocsr(), Iv_y)
        self.Dy_v = kron(Iv_x, _three_point(y, 1))
        self.Dyy_v = kron(Iv_x, _three_point(y, 2))
        # interpolation v -> u points and u -> v points
        Ix_vu = sp.lil_matrix((nx, nx - 1))
        for i in range(1, nx - 1):
            Ix_vu[i, i - 1] = Ix_vu[i, i] = 0.5
        Ix_vu[nx - 1, nx - 2], Ix_vu[nx - 1, nx - 3] = 1.5, -0.5
        Iy_vu = sp.diags([0.5, 0.5], [0, 1], shape=(ny - 1, ny))
        self.I_vu = kron(Ix_vu.tocsr(), Iy_vu)
        Ix_uv = sp.diags([0.5, 0.5], [0, 1], shape=(nx - 1, nx))
        Iy_uv = sp.lil_matrix((ny, ny - 1))
        for j in range(1, ny - 1):
            w = (y[j] - ym[j - 1]) / (ym[j] - ym[j - 1])
            Iy_uv[j, j - 1], Iy_uv[j, j] = 1 - w, w
        self.I_uv = kron(Ix_uv, Iy_uv.tocsr())
        # pressure gradient (interior rows) and divergence
        Gx = sp.lil_matrix((nx, nx - 1))
        for i in range(1, nx - 1):
            Gx[i, i - 1], Gx[i, i] = -1.0 / dx, 1.0 / dx
        self.Gx = kron(Gx.tocsr(), Iu_y)
        Gy = _gy(mac)
        self.Gy = kron(Iv_x, Gy)
        self.Div_u = kron(sp.diags([-1.0 / dx, 1.0 / dx], [0, 1], shape=(nx - 1, nx)), Iu_y)
        self.Div_v = kron(Iv_x, sp.diags([-1.0 / mac.hy, 1.0 / mac.hy], [0, 1], shape=(ny - 1, ny)))
        # u_y on the outflow column, evaluated at the v-points of the last column
        self.Uy_L = kron(_entry((nx - 1, nx), nx - 2, nx - 1), Gy)
        # half cell at x = L
        self.half_u = kron(_entry((nx, nx), nx - 1, nx - 1) - _entry((nx, nx), nx - 1, nx - 2), Iu_y) / dx
        self.half_P = kron(_entry((nx, nx - 1), nx - 1, nx - 2), Iu_y)
        # row masks
        iu = np.arange(nx)[:, None] * np.ones(ny - 1)
        self.u_dirichlet = (iu == 0).ravel()
        self.u_outflow = (iu == nx - 1).ravel()
        self.u_interior = ~(self.u_dirichlet | self.u_outflow)
        jv = np.ones(nx - 1)[:, None] * np.arange(ny)
        self.v_dirichlet = ((jv == 0) | (jv == ny - 1)).ravel()
        self.v_interior = ~self.v_dirichlet

    def convect(self, a_u, a_v, b_u, b_v):
        """Discrete ``(a . grad) b`` at u- and v-points for staggered pairs ``a``, ``b``."""
        au, av, bu, bv = (np.ravel(t) for t in (a_u, a_v, b_u, b_v))
        cu = au * (self.Dx_u @ bu) + (self.I_vu @ av) * (self.Dy_u @ bu)
        cv = (self.I_uv @ au) * (self.Dx_v @ bv) + av * (self.Dy_v @ bv)
        return cu, cv

    def convect_jacobian(self, a_u, a_v, b_u, b_v):
        """Jacobian of ``convect`` in ``a`` (first pair) and ``b`` (second pair) as sparse blocks."""
        au, av, bu, bv = (np.ravel(t) for t in (a_u, a_v, b_u, b_v))
        D = sp.diags
        da = sp.bmat([[D(self.Dx_u @ bu), D(self.Dy_u @ bu) @ self.I_vu],
                      [D(self.Dx_v @ bv) @ self.I_uv, D(self.Dy_v @ bv)]], format="csr")
        db = sp.bmat([[D(au) @ self.Dx_u + D(self.I_vu @ av) @ self.Dy_u, None],
                      [None, D(self.I_uv @ au) @ self.Dx_v + D(av) @ self.Dy_v]], format="csr")
        return da, db


# ---------------------------------------------------------------------------
# profile coefficients

@dataclass
class ProfileCoefficients:
    """``u_s, v_s`` and their first derivatives on the layer nodes."""

    grid: TensorGrid
    us: np.ndarray
    usx: np.ndarray
    usy: np.ndarray
    vs: np.ndarray
    vsx: np.ndarray
    vsy: np.ndarray

    @classmethod
    def from_stack(cls, stack) -> "ProfileCoefficients":
        d = stack.profile_derivatives()
        return cls(stack.grid, d["u"], d["u_x"], d["u_y"], d["v"], d["v_x"], d["v_y"])

    @classmethod
    def constant(cls, grid: TensorGrid, u: float = 1.0) -> "ProfileCoefficients":
        z = np.zeros(grid.shape)
        return cls(grid, z + u, z, z, z, z, z)


def _coefficients(source, grid: TensorGrid | None) -> ProfileCoefficients:
    if isinstance(source, ProfileCoefficients):
        return source
    c = ProfileCoefficients.from_stack(source)
    if grid is not None and not grid.same_nodes(c.grid):
        raise ValueError("remainder grid must coincide with the layer grid")
    return c


# ---------------------------------------------------------------------------
# linear system

@dataclass
class LinearSystem:
    mac: MacGrid
    ops: MacOperators
    coeffs: ProfileCoefficients
    eps: float
    gamma: float
    options: SolverOptions
    matrix: sp.csc_matrix
    lu: object = field(repr=False)

    @property
    def grid(self) -> TensorGrid:
        return self.mac.grid

    def rhs(self, f_u, g_v, aL=None, bL=None, bL_y=None) -> np.ndarray:
        """Right-hand side for forcing at u/v points and outflow data sampled on ``ym``/``y``."""
        o, mac = self.ops, self.mac
        ny = mac.ny
        bu = np.where(o.u_dirichlet, 0.0, np.ravel(f_u))
        bv = np.where(o.v_interior, self.eps * np.ravel(g_v), 0.0)
        bu = bu.reshape(mac.u_shape)
        bv = bv.reshape(mac.v_shape)
        if aL is not None:
            bu[-1] -= 2.0 / mac.dx * np.asarray(aL)
        if bL_y is not None:
            bu[-1] += np.asarray(bL_y)
        if bL is not None:
            bv[-1, 1:ny - 1] += self.eps / mac.dx * np.asarray(bL)[1:ny - 1]
        return np.concatenate([bu.ravel(), bv.ravel(), np.zeros(mac.np)])

    def equation_rows(self, Fu, Fv) -> np.ndarray:
        """Map momentum-equation values onto the rows that carry them (with row scaling)."""
        o = self.ops
        return np.concatenate([np.where(o.u_dirichlet, 0.0, Fu),
                               np.where(o.v_interior, self.eps * Fv, 0.0), np.zeros(self.mac.np)])

    def row_operator(self) -> sp.csr_matrix:
        o = self.ops
        return sp.diags(np.concatenate([(~o.u_dirichlet).astype(float),
                                        self.eps * o.v_interior, np.zeros(self.mac.np)])).tocsr()

    def solve(self, b: np.ndarray) -> np.ndarray:
        z = self.lu.solve(b)
        r = b - self.matrix @ z
        scale = max(np.linalg.norm(b), 1e-300)
        if np.linalg.norm(r) > self.options.residual_tol * scale:
            z = z + self.lu.solve(r)       # one step of iterative refinement
            r = b - self.matrix @ z
        rel = float(np.linalg.norm(r) / scale)
        if not np.isfinite(rel) or rel > self.options.residual_tol:
            raise SolveFailure(f"linear residual {rel:.3e} above {self.options.residual_tol:.1e}")
        return z


def assemble_linear_operator(stack, grid: TensorGrid | None = None,
                             options: SolverOptions = SolverOptions(), gamma: float | None = None) -> LinearSystem:
    """MAC discretisation of the linearised remainder operator with stress-free outflow rows.

    ``stack`` is a :class:`LayerStack` or a :class:`ProfileCoefficients`.
    """
    coeffs = _coefficients(stack, grid)
    g = coeffs.grid
    if float(coeffs.us.min()) <= 0.0:
        raise PositivityLoss("remainder operator", float(coeffs.us.min()))
    gamma = gamma if gamma is not None else getattr(stack, "gamma", 0.125)
    eps = g.eps
    mac = MacGrid(g)
    o = MacOperators(mac)
    D = sp.diags
    cu = {k: mac.nodes_to_u(getattr(coeffs, k)).ravel() for k in ("us", "usx", "usy", "vs")}
    cv = {k: mac.nodes_to_v(getattr(coeffs, k)).ravel() for k in ("us", "vsx", "vs", "vsy")}
    S_uu = D(cu["us"]) @ o.Dx_u + D(cu["usx"]) + D(cu["vs"]) @ o.Dy_u
    S_uv = D(cu["usy"]) @ o.I_vu
    S_vv = D(cv["us"]) @ o.Dx_v + D(cv["vs"]) @ o.Dy_v + D(cv["vsy"])
    S_vu = D(cv["vsx"]) @ o.I_uv
    visc_u = -o.Dyy_u - eps * o.Dxx_u
    visc_v = -o.Dyy_v - eps * o.Dxx_v
    reg_uu = reg_vv = reg_vu = None
    if options.alpha > 0:
        reg_uu, reg_vv, reg_vu = _regulariser(mac, o, options, eps)
        visc_u = visc_u + reg_uu
        visc_v = visc_v + reg_vv
    Rint, Rout, Rdir = (D(m.astype(float)) for m in (o.u_interior, o.u_outflow, o.u_dirichlet))
    Rv = D(o.v_interior.astype(float))
    Rvd = D(o.v_dirichlet.astype(float))
    Auu = Rint @ visc_u + Rout @ (4.0 * eps / mac.dx * o.half_u) + (Rint + Rout) @ S_uu + Rdir
    Auv = (Rint + Rout) @ S_uv
    AuP = Rint @ o.Gx - Rout @ (2.0 / mac.dx * o.half_P)
    Avu = S_vu + o.Uy_L / mac.dx
    if reg_vu is not None:
        Avu = Avu + reg_vu
    Avv = eps * Rv @ (visc_v + S_vv) + Rvd
    Avu = eps * Rv @ Avu
    AvP = Rv @ o.Gy
    A = sp.bmat([[Auu, Auv, AuP], [Avu, Avv, AvP], [o.Div_u, o.Div_v, None]], format="csc")
    try:
        lu = spla.splu(A, permc_spec="COLAMD")
    except RuntimeError as exc:
        raise SingularSystem(f"factorisation failed ({exc}); size {A.shape[0]}, nnz {A.nnz}, "
                             f"L = {g.L}, eps = {eps:g}") from exc
    return LinearSystem(mac, o, coeffs, eps, gamma, options, A, lu)


def _regulariser(mac: MacGrid, o: MacOperators, options: SolverOptions, eps: float):
    """Weighted y-diffusion ``-alpha d_y{w d_y}`` and the mixed ``-alpha w d_x{u_y + eps v_x}``."""
    chi1 = 1.0 - Plateau(1.0, 2.0)(mac.y)
    w_nodes = (1.0 + mac.y ** 2) ** options.m * chi1
    w_mid = (1.0 + mac.ym ** 2) ** options.m * (1.0 - Plateau(1.0, 2.0)(mac.ym))

    def flux_form(pts, faces, w_faces, lo, hi):
        n = len(pts)
        ext = np.concatenate([[lo], pts, [hi]])
        rows, cols, vals = [], [], []
        for i in range(n):
            hl, hr = ext[i + 1] - ext[i], ext[i + 2] - ext[i + 1]
            width = faces[i + 1] - faces[i]
            cl, cr = w_faces[i] / hl / width, w_faces[i + 1] / hr / width
            rows += [i, i]
            cols += [i, i]
            vals += [cl, cr]
            if i > 0:
                rows.append(i); cols.append(i - 1); vals.append(-cl)
            if i < n - 1:
                rows.append(i); cols.append(i + 1); vals.append(-cr)
        return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))

    # u lives at ym with cell faces at the nodes y
    Ku = flux_form(mac.ym, mac.y, w_nodes, mac.y[0], mac.y[-1])
    faces_v = np.concatenate([[mac.y[0]], mac.ym, [mac.y[-1]]])
    w_faces_v = np.concatenate([[0.0], w_mid, [w_mid[-1]]])
    Kv = flux_form(mac.y, faces_v, w_faces_v, 2 * mac.y[0] - mac.y[1], 2 * mac.y[-1] - mac.y[-2])
    a = options.alpha
    reg_uu = 10.0 * a * sp.kron(sp.identity(mac.nx), Ku, format="csr")
    wv = np.tile(w_nodes, mac.nx - 1)
    ux_y = sp.kron(sp.diags([-1.0 / mac.dx, 1.0 / mac.dx], [0, 1], shape=(mac.nx - 1, mac.nx)),
                   _gy(mac), format="csr")
    reg_vv = 2.0 * a * sp.kron(sp.identity(mac.nx - 1), Kv, format="csr") - a * eps * sp.diags(wv) @ o.Dxx_v
    reg_vu = -a * sp.diags(wv) @ ux_y
    return reg_uu, reg_vv, reg_vu


def _gy(mac: MacGrid):
    Gy = sp.lil_matrix((mac.ny, mac.ny - 1))
    for j in range(1, mac.ny - 1):
        h = mac.ym[j] - mac.ym[j - 1]
        Gy[j, j - 1], Gy[j, j] = -1.0 / h, 1.0 / h
    return Gy.tocsr()


# ---------------------------------------------------------------------------
# homogenisation of the inflow data

@dataclass
class Homogenizer:
    """Lift ``u0 = a0 - x b0'``, ``v0 = b0`` and the forcing it induces.

    ``Lb1, Lb2`` hold the lift's contribution at the most recent iterate
    (u- and v-points); ``aL_bar, bL_bar`` are callables of ``y``.
    """

    bd: BoundaryData
    mac: MacGrid
    eps: float
    gamma: float
    u0_aux: ScalarField
    v0_aux: ScalarField
    lift_u: dict
    lift_v: dict
    static_u: np.ndarray
    static_v: np.ndarray
    Lb1: np.ndarray | None = None
    Lb2: np.ndarray | None = None

    def aL_bar(self, y):
        return self.bd.aL(y) - 2.0 * self.eps * self.bd.b0(y, 1)

    def bL_bar(self, y, n: int = 0):
        L = self.mac.grid.L
        return self.bd.bL(y, n) - (self.bd.a0(y, n + 1) - L * self.bd.b0(y, n + 2))

    @property
    def is_trivial(self) -> bool:
        return self.bd.a0 is zero_profile and self.bd.b0 is zero_profile

    def cross_terms(self, ops: MacOperators, u, v):
        """``(ubar . grad) u0 + (u0 . grad) ubar`` at u- and v-points."""
        lu, lv = self.lift_u, self.lift_v
        u, v = np.ravel(u), np.ravel(v)
        vu, uv = ops.I_vu @ v, ops.I_uv @ u
        cu = u * lu["u0x"] + vu * lu["u0y"] + lu["u0"] * (ops.Dx_u @ u) + lu["v0"] * (ops.Dy_u @ u)
        cv = uv * lv["v0x"] + v * lv["v0y"] + lv["u0"] * (ops.Dx_v @ v) + lv["v0"] * (ops.Dy_v @ v)
        return cu, cv

    def cross_jacobian(self, ops: MacOperators):
        lu, lv = self.lift_u, self.lift_v
        D = sp.diags
        return sp.bmat([[D(lu["u0x"]) + D(lu["u0"]) @ ops.Dx_u + D(lu["v0"]) @ ops.Dy_u, D(lu["u0y"]) @ ops.I_vu],
                        [D(lv["v0x"]) @ ops.I_uv, D(lv["v0y"]) + D(lv["u0"]) @ ops.Dx_v + D(lv["v0"]) @ ops.Dy_v]],
                       format="csr")

    def forcing(self, ops: MacOperators, u, v):
        """``L^b`` at the iterate ``(u, v)``; refreshed each Picard step."""
        scale = self.eps ** (0.5 + self.gamma)
        cu, cv = self.cross_terms(ops, u, v)
        self.Lb1 = self.static_u - scale * cu
        self.Lb2 = self.static_v - scale * cv
        return self.Lb1, self.Lb2


def _lift_samples(bd: BoundaryData, X, Y):
    a = lambda n: bd.a0(Y, n)
    b = lambda n: bd.b0(Y, n)
    return {"u0": a(0) - X * b(1), "u0x": -b(1), "u0y": a(1) - X * b(2), "u0yy": a(2) - X * b(3),
            "v0": b(0), "v0x": np.zeros_like(Y), "v0y": b(1), "v0yy": b(2)}


def homogenize_inflow(bd: BoundaryData, stack, grid: TensorGrid | None = None,
                      gamma: float | None = None) -> Homogenizer:
    """Lift of the inflow traces and the induced forcing, with modified outflow data.

    With ``ubar = u - u0`` the remainder equations keep their form with the extra forcing
    ``Lap_eps u0 - S(u0) - eps^(1/2+gamma) [(ubar.grad) u0 + (u0.grad) ubar + (u0.grad) u0]``.
    """
    coeffs = _coefficients(stack, grid)
    g = coeffs.grid
    eps = g.eps
    gamma = gamma if gamma is not None else getattr(stack, "gamma", 0.125)
    bd.validate(g.y, eps)
    mac = MacGrid(g)
    nodes = _lift_samples(bd, *np.meshgrid(g.x, g.y, indexing="ij"))
    lu = {k: a.ravel() for k, a in _lift_samples(bd, *mac.u_points()).items()}
    lv = {k: a.ravel() for k, a in _lift_samples(bd, *mac.v_points()).items()}
    cu = {k: mac.nodes_to_u(getattr(coeffs, k)).ravel() for k in ("us", "usx", "usy", "vs")}
    cv = {k: mac.nodes_to_v(getattr(coeffs, k)).ravel() for k in ("us", "vsx", "vs", "vsy")}
    scale = eps ** (0.5 + gamma)
    Su = cu["us"] * lu["u0x"] + cu["usx"] * lu["u0"] + cu["vs"] * lu["u0y"] + cu["usy"] * lu["v0"]
    Sv = cv["us"] * lv["v0x"] + cv["vsx"] * lv["u0"] + cv["vs"] * lv["v0y"] + cv["vsy"] * lv["v0"]
    # the lift is linear in x, so Lap_eps reduces to d_yy
    static_u = lu["u0yy"] - Su - scale * (lu["u0"] * lu["u0x"] + lu["v0"] * lu["u0y"])
    static_v = lv["v0yy"] - Sv - scale * (lv["u0"] * lv["v0x"] + lv["v0"] * lv["v0y"])
    h = Homogenizer(bd, mac, eps, gamma, ScalarField(g, nodes["u0"]), ScalarField(g, nodes["v0"]),
                    lu, lv, static_u, static_v)
    h.Lb1, h.Lb2 = static_u.copy(), static_v.copy()
    return h


# ---------------------------------------------------------------------------
# solves

@dataclass
class RemainderState:
    """Homogenised remainder on the staggered grid plus its right-hand sides and ledger."""

    system: LinearSystem
    u: np.ndarray
    v: np.ndarray
    P: np.ndarray
    f: np.ndarray
    g: np.ndarray
    ledger: list = field(default_factory=list)
    norm_report: dict = field(default_factory=dict)

    @property
    def mac(self) -> MacGrid:
        return self.system.mac

    def nodal(self) -> tuple[ScalarField, ScalarField]:
        g = self.mac.grid
        return ScalarField(g, self.mac.u_to_nodes(self.u)), ScalarField(g, self.mac.v_to_nodes(self.v))

    def vector(self) -> np.ndarray:
        return MacGrid.join(self.u, self.v, self.P)

    def divergence(self) -> np.ndarray:
        o = self.system.ops
        return (o.Div_u @ self.u.ravel() + o.Div_v @ self.v.ravel()).reshape(self.mac.p_shape)

    def ledger_rows(self):
        return [(r["iter"], r["x_norm"], r["update_norm"], r["contraction_factor"]) for r in self.ledger]


def staggered_forcing(mac: MacGrid, f, g):
    """Accept nodal ScalarFields/arrays or arrays already on u-/v-points."""
    def conv(a, shape, to):
        a = a.values if isinstance(a, ScalarField) else np.asarray(a, dtype=float)
        if a.shape == shape or a.shape == (int(np.prod(shape)),):
            return a.ravel()
        if a.shape == (mac.nx, mac.ny):
            return to(a).ravel()
        if a.ndim == 0:
            return np.full(int(np.prod(shape)), float(a))
        raise ValueError(f"forcing of shape {a.shape} fits neither nodes nor staggered points")
    return conv(f, mac.u_shape, mac.nodes_to_u), conv(g, mac.v_shape, mac.nodes_to_v)


def x_norm_of(mac: MacGrid, u, v, eps: float, gamma: float) -> dict:
    g = mac.grid
    return compute_X_norm(ScalarField(g, mac.u_to_nodes(np.reshape(u, mac.u_shape))),
                          ScalarField(g, mac.v_to_nodes(np.reshape(v, mac.v_shape))), eps, gamma)


def solve_linearized(system: LinearSystem, f, g, aL=None, bL=None) -> RemainderState:
    """Direct solve of the linearised problem; ``aL, bL`` are callables of ``y`` (or None)."""
    mac = system.mac
    fu, gv = staggered_forcing(mac, f, g)
    aLv = aL(mac.ym) if aL is not None else None
    bLv = bL(mac.y) if bL is not None else None
    bLy = bL(mac.ym, 1) if bL is not None else None
    z = system.solve(system.rhs(fu, gv, aLv, bLv, bLy))
    u, v, P = mac.split(z)
    st = RemainderState(system, u.copy(), v.copy(), P.copy(), fu, gv)
    st.norm_report = x_norm_of(mac, u, v, system.eps, system.gamma)
    return st


@dataclass
class RemainderProblem:
    """Everything the nonlinear loop needs: operator, lift and the external forcing."""

    system: LinearSystem
    homogenizer: Homogenizer
    f_ext: np.ndarray
    g_ext: np.ndarray

    @property
    def eps(self) -> float:
        return self.system.eps

    def nonlinear(self, u, v):
        scale = self.eps ** (0.5 + self.system.gamma)
        cu, cv = self.system.ops.convect(u, v, u, v)
        return scale * cu, scale * cv

    def rhs_at(self, u, v):
        """Right-hand sides ``f, g`` at the iterate (external forcing + L^b - N)."""
        Lb1, Lb2 = self.homogenizer.forcing(self.system.ops, u, v)
        Nu, Nv = self.nonlinear(u, v)
        return self.f_ext + Lb1 - Nu, self.g_ext + Lb2 - Nv

    def boundary_rhs(self, fu, gv):
        h, mac = self.homogenizer, self.system.mac
        return self.system.rhs(fu, gv, h.aL_bar(mac.ym), h.bL_bar(mac.y), h.bL_bar(mac.ym, 1))

    def residual(self, z) -> np.ndarray:
        """Discrete nonlinear residual ``A z - b(z)``."""
        u, v, _ = self.system.mac.split(z)
        fu, gv = self.rhs_at(u.ravel(), v.ravel())
        return self.system.matrix @ z - self.boundary_rhs(fu, gv)


def remainder_problem(stack, bd: BoundaryData, options: SolverOptions = SolverOptions(),
                      forcing=None, grid: TensorGrid | None = None, system: LinearSystem | None = None
                      ) -> RemainderProblem:
    """Operator, lift and forcing; by default the forcing is ``-eps^(-1/2-gamma) (R^{u,1}, R^{v,1})``."""
    system = system or assemble_linear_operator(stack, grid, options)
    hom = homogenize_inflow(bd, system.coeffs, gamma=system.gamma)
    mac = system.mac
    if forcing is None:
        if getattr(stack, "Ru1", None) is None:
            raise ValueError("stack carries no residuals; pass forcing explicitly")
        scale = -system.eps ** (-0.5 - system.gamma)
        forcing = (scale * stack.Ru1.values, scale * stack.Rv1.values)
    fu, gv = staggered_forcing(mac, *forcing)
    return RemainderProblem(system, hom, fu, gv)


def picard_iterate(problem: RemainderProblem, initial: RemainderState | None = None,
                   max_iter: int | None = None, tol: float | None = None) -> RemainderState:
    """Fixed-point loop ``z <- A^{-1} b(z)`` with the contraction factor recorded per step."""
    sysm, mac = problem.system, problem.system.mac
    opts = sysm.options
    max_iter = max_iter or opts.max_iter
    tol = tol if tol is not None else opts.tol
    if initial is None:
        u = np.zeros(mac.nu)
        v = np.zeros(mac.nv)
    else:
        u, v = initial.u.ravel().copy(), initial.v.ravel().copy()
    z = MacGrid.join(u, v, np.zeros(mac.np) if initial is None else initial.P)
    ledger, prev, streak = [], None, 0
    for k in range(1, max_iter + 1):
        fu, gv = problem.rhs_at(u, v)
        z_new = sysm.solve(problem.boundary_rhs(fu, gv))
        if opts.damping < 1.0:
            z_new = z + opts.damping * (z_new - z)
        du, dv, _ = mac.split(z_new - z)
        upd = x_norm_of(mac, du, dv, sysm.eps, sysm.gamma)["total"]
        z = z_new
        u, v, P = (a.ravel() for a in mac.split(z))
        xn = x_norm_of(mac, u, v, sysm.eps, sysm.gamma)["total"]
        factor = upd / prev if prev else float("nan")
        ledger.append({"iter": k, "x_norm": xn, "update_norm": upd, "contraction_factor": factor})
        if upd <= tol * max(1.0, xn):
            break
        streak = streak + 1 if (prev and factor >= 1.0) else 0
        if streak >= 3:
            raise NoContraction([r["contraction_factor"] for r in ledger])
        prev = upd
    else:
        raise SolveFailure(f"Picard loop did not reach {tol:g} in {max_iter} steps")
    fu, gv = problem.rhs_at(u, v)
    uu, vv, PP = mac.split(z)
    st = RemainderState(sysm, uu.copy(), vv.copy(), PP.copy(), fu, gv, ledger)
    st.norm_report = x_norm_of(mac, uu, vv, sysm.eps, sysm.gamma)
    st.norm_report["contraction_factor"] = contraction_factor(ledger)
    return st


NOISE_FLOOR = 1e-9   # relative X-norm size of updates dominated by round-off


def contraction_factor(ledger) -> float:
    """Largest update ratio over steps whose update is above the round-off floor."""
    if len(ledger) < 2:
        return 0.0
    floor = NOISE_FLOOR * max(r["x_norm"] for r in ledger)
    ratios = [r["contraction_factor"] for r in ledger[1:]
              if r["update_norm"] > floor and np.isfinite(r["contraction_factor"])]
    return float(max(ratios)) if ratios else 0.0


def newton_solve(problem: RemainderProblem, tol: float = 1e-12, max_iter: int = 30) -> RemainderState:
    """Newton on the full discrete nonlinear system; intended for small grids (oracle)."""
    sysm, mac = problem.system, problem.system.mac
    ops = sysm.ops
    scale = problem.eps ** (0.5 + sysm.gamma)
    Rrow = sysm.row_operator()
    Jh = problem.homogenizer.cross_jacobian(ops)
    z = np.zeros(mac.size)
    for _ in range(max_iter):
        r = problem.residual(z)
        u, v, _ = mac.split(z)
        da, db = ops.convect_jacobian(u, v, u, v)
        dF = sp.bmat([[-scale * (da + db + Jh), None], [None, sp.csr_matrix((mac.np, mac.np))]], format="csr")
        J = sysm.matrix - Rrow @ dF
        dz = spla.spsolve(J.tocsc(), -r)
        z = z + dz
        if np.linalg.norm(dz) <= tol * max(1.0, np.linalg.norm(z)):
            break
    else:
        raise SolveFailure("Newton oracle did not converge")
    u, v, P = mac.split(z)
    fu, gv = problem.rhs_at(u.ravel(), v.ravel())
    return RemainderState(sysm, u.copy(), v.copy(), P.copy(), fu, gv)


@dataclass
class FullSolution:
    U: ScalarField
    V: ScalarField
    u_error: float
    v_error: float
    remainder_sup: float


def solve_full_ns(stack, bd: BoundaryData, state: RemainderState, homogenizer: Homogenizer | None = None
                  ) -> FullSolution:
    """``U = u_s + eps^(1/2+gamma) u``, ``V = sqrt(eps)(v_s + eps^(1/2+gamma) v)`` in Eulerian units.

    Errors are sup-norms over the layer nodes of ``U - u0e - u0p`` and ``V - v0e``.
    """
    g = stack.grid
    eps = g.eps
    se = np.sqrt(eps)
    h = homogenizer or homogenize_inflow(bd, state.system.coeffs, gamma=state.system.gamma)
    un, vn = state.nodal()
    u = un.values + h.u0_aux.values
    v = vn.values + h.v0_aux.values
    w = eps ** (0.5 + stack.gamma)
    U = stack.us.values + w * u
    V = se * (stack.vs.values + w * v)
    E0, L0 = stack.parts["E0"], stack.parts["L0"]
    u_err = float(np.abs(U - E0["u"] - L0["u"]).max())
    v_err = float(np.abs(V - E0["v"]).max())
    return FullSolution(ScalarField(g, U), ScalarField(g, V), u_err, v_err,
                        float(np.abs(w * u).max()))


def audit_fields(state: RemainderState, homogenizer: Homogenizer):
    """Nodal fields for the estimate audits: the homogenised iterate, its forcing and outflow data."""
    from .estimate_auditor import AuditFields
    mac = state.mac
    un, vn = state.nodal()
    f = mac.u_values_to_nodes(np.reshape(state.f, mac.u_shape))
    g = mac.v_values_to_nodes(np.reshape(state.g, mac.v_shape))
    y = mac.y
    h = homogenizer
    aL_y = h.bd.aL(y, 1) - 2.0 * h.eps * h.bd.b0(y, 2)
    return AuditFields(un, vn, f, g, h.aL_bar(y), h.bL_bar(y), aL_y, h.bL_bar(y, 1))
