"""Leading-order Euler flow: a shear profile perturbed through its vorticity function.

The stream function is ``phi_E = phi_0 + psi`` with ``phi_0 = int_0^Y U_0``.  The
flow satisfies ``-Lap phi_E = F(phi_E)`` where ``F`` is the total vorticity
function: the one carried by the shear itself plus the perturbation ``f_e``.
With ``F_0(phi_0(Y)) = -U_0'(Y)`` this gives the perturbation equation

    -Lap psi = U_0'(Y) + F(phi_0 + psi),

which vanishes identically for ``f_e = 0`` and ``psi = 0`` boundary data.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.interpolate import CubicSpline, PchipInterpolator

from .errors import HypothesisViolation, NonConvergence, NonMonotone
from .grid_core import ScalarField, TensorGrid, build_grid, d_axis, integrate
from .smooth import Bump, Ramp


@dataclass
class ShearSpec:
    """Shear profile ``U_0(Y)``; ``U0(Y, n)`` returns the ``n``-th derivative."""

    U0: Callable
    phi0: Callable
    flat_until: float = 1.0
    name: str = "custom"

    def validate(self, Y) -> dict:
        u = self.U0(Y)
        du = self.U0(Y, 1)
        c0, C0 = float(u.min()), float(u.max())
        if c0 <= 0:
            raise HypothesisViolation("c0", c0, "(shear profile must stay positive)")
        if du.min() < -1e-12:
            raise HypothesisViolation("min dU0/dY", float(du.min()))
        near = Y[Y <= self.flat_until]
        if np.max(np.abs(self.U0(near) - 1.0)) > 1e-12:
            raise HypothesisViolation("|U0 - 1| near wall", float(np.max(np.abs(self.U0(near) - 1.0))))
        return {"c0": c0, "C0": C0}


def canonical_shear() -> ShearSpec:
    """``U_0 = 1 + S(Y)/2`` with ``S`` a smooth ramp from 0 to 1 across ``[1, 3]``."""
    ramp = Ramp(1.0, 3.0)

    def U0(Y, n=0):
        Y = np.asarray(Y, dtype=float)
        if n == 0:
            return 1.0 + 0.5 * ramp(Y)
        return 0.5 * ramp(Y, n)

    def phi0(Y):
        Y = np.asarray(Y, dtype=float)
        return Y + 0.5 * ramp.antiderivative(Y)

    return ShearSpec(U0, phi0, flat_until=1.0, name="canonical")


def uniform_shear(value: float = 1.0) -> ShearSpec:
    def U0(Y, n=0):
        Y = np.asarray(Y, dtype=float)
        return np.full_like(Y, value) if n == 0 else np.zeros_like(Y)

    return ShearSpec(U0, lambda Y: value * np.asarray(Y, dtype=float),
                     flat_until=np.inf if value == 1.0 else 0.0, name="uniform")


@dataclass
class PerturbationSpec:
    """Perturbation vorticity ``f_e`` and inflow/outflow stream corrections.

    ``fe(s, n)`` returns the ``n``-th derivative, ``Fe(s)`` its integral from 0.
    """

    fe: Callable
    Fe: Callable
    A0: Callable
    AL: Callable
    delta: float
    L: float

    def validate(self, s_samples, Y_samples, strict: bool = True) -> None:
        f = self.fe(s_samples)
        if f.min() < 0 or f.max() > self.delta * (1 + 1e-12):
            raise HypothesisViolation("f_e range", float(f.max()), f"(must lie in [0, {self.delta}])")
        if np.any(f[s_samples < 1e-3] != 0):
            raise HypothesisViolation("f_e near 0", float(np.abs(f[s_samples < 1e-3]).max()))
        cap = self.delta * self.L ** 10
        for name, A in (("A0", self.A0), ("AL", self.AL)):
            a = A(Y_samples)
            if a.min() < 0 or a.max() > cap * (1 + 1e-12):
                raise HypothesisViolation(name, float(a.max()), f"(must lie in [0, delta L^10 = {cap:.3g}])")
        if strict and np.allclose(self.A0(Y_samples), self.AL(Y_samples)):
            raise HypothesisViolation("max |A0 - AL|", 0.0, "(inflow and outflow data must differ)")


def _zero(s, n=0):
    return np.zeros_like(np.asarray(s, dtype=float))


def canonical_perturbation(delta: float, L: float) -> PerturbationSpec:
    """``f_e`` a bump of height ``delta`` on stream values ``[2, 4]``, ``A_0`` a bump on ``Y in [2, 4]``."""
    fb = Bump(2.0, 4.0, delta)
    ab = Bump(2.0, 4.0, delta * L ** 10)
    return PerturbationSpec(fe=fb, Fe=fb.integral, A0=ab, AL=_zero, delta=delta, L=L)


def zero_perturbation(L: float, delta: float = 0.0) -> PerturbationSpec:
    return PerturbationSpec(fe=_zero, Fe=_zero, A0=_zero, AL=_zero, delta=delta, L=L)


class VorticityFunction:
    """Total vorticity function ``F = F_0 + f_e`` of the perturbed shear flow."""

    def __init__(self, shear: ShearSpec, pert: PerturbationSpec, Y_top: float = 60.0):
        self.shear, self.pert = shear, pert
        Yt = np.linspace(0.0, Y_top, 24001)
        phi = shear.phi0(Yt)
        self._Y_of_phi = CubicSpline(phi, Yt)
        self._phi_top, self._Y_top = phi[-1], Y_top
        self._U_top = float(shear.U0(np.array([Y_top]))[0])

    def Y_of(self, s):
        s = np.asarray(s, dtype=float)
        inside = np.clip(s, 0.0, self._phi_top)
        Y = self._Y_of_phi(inside)
        Y = np.where(s > self._phi_top, self._Y_top + (s - self._phi_top) / self._U_top, Y)
        return np.where(s < 0, s / float(self.shear.U0(np.array([0.0]))[0]), Y)

    def __call__(self, s, n: int = 0):
        s = np.asarray(s, dtype=float)
        Y = self.Y_of(s)
        U0 = self.shear.U0
        if n == 0:
            base = -U0(Y, 1)
        elif n == 1:
            base = -U0(Y, 2) / U0(Y)
        else:
            raise ValueError("only F and F' are available")
        return base + self.pert.fe(s, n) if n else base + self.pert.fe(s)

    def integral(self, s):
        """``int_0^s F``; the shear part integrates to ``-(U_0(Y(s))^2 - U_0(0)^2)/2``."""
        Y = self.Y_of(s)
        U0 = self.shear.U0
        return -0.5 * (U0(Y) ** 2 - U0(np.zeros(1))[0] ** 2) + self.pert.Fe(s)


@dataclass
class EulerFlow:
    """Leading-order Euler fields on an Eulerian grid (``grid.y`` is ``Y``)."""

    grid: TensorGrid
    psi: ScalarField
    phiE: ScalarField
    u0e: ScalarField
    v0e: ScalarField
    P0e: ScalarField
    shear: ShearSpec
    pert: PerturbationSpec
    vorticity: VorticityFunction
    hypothesis_report: dict = field(default_factory=dict)
    _derivs: dict = field(default=None, repr=False)

    @property
    def Y(self):
        return self.grid.y

    def derivatives(self) -> dict:
        """All first to third derivatives of the Euler fields used downstream."""
        if self._derivs is not None:
            return self._derivs
        g = self.grid
        x, Y = g.x, g.y
        p = self.psi.values
        dx = lambda a, k=1: d_axis(a, x, 0, k)
        dY = lambda a, k=1: d_axis(a, Y, 1, k)
        p_x, p_Y = dx(p), dY(p)
        p_xx, p_YY, p_xY = dx(p, 2), dY(p, 2), dY(p_x)
        p_xxY, p_xYY, p_YYY, p_xxx = dY(p_xx), dY(p_xY), dY(p_YY), dx(p_xx)
        U = self.shear.U0
        Ub = lambda n: np.broadcast_to(U(Y, n), p.shape)
        d = {
            "u": Ub(0) + p_Y, "u_x": p_xY, "u_Y": Ub(1) + p_YY,
            "u_xx": p_xxY, "u_YY": Ub(2) + p_YYY, "u_xY": p_xYY,
            "v": -p_x, "v_x": -p_xx, "v_Y": -p_xY,
            "v_xx": -p_xxx, "v_YY": -p_xYY, "v_xY": -p_xxY,
        }
        d["lap_u"] = d["u_xx"] + d["u_YY"]
        d["lap_v"] = d["v_xx"] + d["v_YY"]
        d["u_xYY"] = dY(p_xYY)
        d["v_YYY"] = -dY(p_xYY)
        d["v_xYY"] = -dY(dY(p_xxY))
        F = self.vorticity(self.phiE.values)
        u, v = d["u"], d["v"]
        d["P"] = self.P0e.values
        d["P_x"] = -(u * d["u_x"] + v * d["v_x"]) + F * v
        d["P_Y"] = -(u * d["u_Y"] + v * d["v_Y"]) - F * u
        self._derivs = d
        return d


def euler_grid(L: float, nx: int, Y_max: float = 12.0, nY: int = 481) -> TensorGrid:
    """Eulerian grid: same x-nodes as the boundary-layer grid, uniform ``Y`` on ``[0, Y_max]``."""
    return build_grid(L, Y_max, nx, nY, 1.0, 1.0)


def _dirichlet_laplacian(x, y):
    """Five-point (nonuniform in y) Laplacian on all nodes; boundary rows are zero."""
    def d2(c):
        n = len(c)
        h = np.diff(c)
        rows, cols, vals = [], [], []
        for i in range(1, n - 1):
            hm, hp = h[i - 1], h[i]
            rows += [i, i, i]
            cols += [i - 1, i, i + 1]
            vals += [2 / (hm * (hm + hp)), -2 / (hm * hp), 2 / (hp * (hm + hp))]
        return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    nx, ny = len(x), len(y)
    return (sp.kron(d2(x), sp.identity(ny)) + sp.kron(sp.identity(nx), d2(y))).tocsr()


def _interior_mask(nx, ny):
    m = np.zeros((nx, ny), dtype=bool)
    m[1:-1, 1:-1] = True
    return m.ravel()


class DirichletPoisson:
    """Factorised ``-Lap + c`` on the interior nodes with Dirichlet boundary values."""

    def __init__(self, grid: TensorGrid, coeff=None):
        self.grid = grid
        lap = _dirichlet_laplacian(grid.x, grid.y)
        self.mask = _interior_mask(grid.nx, grid.ny)
        A = -lap
        if coeff is not None:
            A = A + sp.diags(np.ravel(coeff))
        self.A_ii = A[self.mask][:, self.mask].tocsc()
        self.A_ib = A[self.mask][:, ~self.mask]
        self.lu = spla.splu(self.A_ii)

    def solve(self, rhs: np.ndarray, boundary: np.ndarray) -> np.ndarray:
        """Solve with ``rhs`` on interior nodes and ``boundary`` values on the edge."""
        b = np.ravel(rhs)[self.mask] - self.A_ib @ np.ravel(boundary)[~self.mask]
        out = np.ravel(boundary).copy()
        out[self.mask] = self.lu.solve(b)
        return out.reshape(self.grid.shape)


def _boundary_values(grid, left, right):
    b = np.zeros(grid.shape)
    b[0] = left
    b[-1] = right
    b[:, 0] = 0.0
    b[:, -1] = 0.0
    return b


def solve_background_stream(shear: ShearSpec, pert: PerturbationSpec, grid: TensorGrid,
                            tol: float = 1e-12, damping: float = 0.5, max_iter: int = 400,
                            info: dict | None = None) -> ScalarField:
    """Damped Picard iteration for ``-Lap psi = U_0' + F(phi_0 + psi)``."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    Y = grid.y
    pert.validate(np.linspace(0, shear.phi0(np.array([Y[-1]]))[0], 801), Y, strict=False)
    vort = VorticityFunction(shear, pert)
    phi0 = np.broadcast_to(shear.phi0(Y), grid.shape)
    dU0 = np.broadcast_to(shear.U0(Y, 1), grid.shape)
    bnd = _boundary_values(grid, pert.A0(Y), pert.AL(Y))
    bnd[:, -1] = 0.0
    solver = DirichletPoisson(grid)
    psi = bnd.copy()
    wx = np.sqrt(integrate(np.ones(grid.shape), grid))
    for it in range(1, max_iter + 1):
        new = solver.solve(dU0 + vort(phi0 + psi), bnd)
        change = np.sqrt(integrate((new - psi) ** 2, grid)) / wx
        psi = psi + damping * (new - psi)
        if change < tol:
            break
    else:
        raise NonConvergence("background stream Picard", max_iter, change)
    if info is not None:
        info.update(iterations=it, last_change=change, min_psi=float(psi.min()))
    return ScalarField(grid, psi)


def derive_euler_fields(psi: ScalarField, shear: ShearSpec, pert: PerturbationSpec) -> EulerFlow:
    """Velocity and pressure of the Euler flow with stream function ``phi_0 + psi``.

    The pressure follows from Bernoulli along streamlines,
    ``P = -|grad phi|^2 / 2 - int_0^phi F``.
    """
    g = psi.grid
    Y = g.y
    vort = VorticityFunction(shear, pert)
    phiE = shear.phi0(Y)[None, :] + psi.values
    u = shear.U0(Y)[None, :] + d_axis(psi.values, Y, 1)
    v = -d_axis(psi.values, g.x, 0)
    P = -0.5 * (u ** 2 + v ** 2) - vort.integral(phiE)
    return EulerFlow(g, psi, psi.like(phiE), psi.like(u), psi.like(v), psi.like(P),
                     shear, pert, vort)


@dataclass
class HypothesisReport:
    c0: float
    C0: float
    v_over_Y: float
    weighted_sups: dict
    passed: bool
    note: str = "weighted sups checked for k, m <= 4 only"


def verify_euler_hypotheses(flow: EulerFlow, smallness_budget: float = 0.1,
                            max_order: int = 4) -> HypothesisReport:
    """Measure positivity, the ``v/Y`` smallness and weighted derivative sups."""
    g = flow.grid
    u, v = flow.u0e.values, flow.v0e.values
    c0, C0 = float(u.min()), float(u.max())
    Y = g.y
    vY = d_axis(v, Y, 1)
    ratio = np.empty_like(v)
    ratio[:, 1:] = v[:, 1:] / Y[1:]
    ratio[:, 0] = vY[:, 0]
    v_over_Y = float(np.abs(ratio).max())
    sups = {}
    for name, f in (("u", u), ("v", v)):
        layers = [[f]]
        for m in range(1, max_order + 1):
            prev = layers[-1]
            nxt = [d_axis(prev[0], g.x, 0)] + [d_axis(a, Y, 1) for a in prev]
            layers.append(nxt)
        for m in range(max_order + 1):
            for k in range(max_order + 1):
                val = max(float(np.max(np.abs(a * Y[None, :] ** k))) for a in layers[m])
                sups[(name, k, m)] = val
    rep = HypothesisReport(c0, C0, v_over_Y, sups, True)
    flow.hypothesis_report.update(c0=c0, C0=C0, v_over_Y=v_over_Y)
    if c0 <= 0:
        rep.passed = False
        raise HypothesisViolation("c0", c0, "(u0e must stay positive)")
    if v_over_Y > smallness_budget:
        rep.passed = False
        raise HypothesisViolation("||v0e/Y||_inf", v_over_Y, f"(budget {smallness_budget})")
    return rep


class VorticityFit:
    """Monotone-cubic fit of the vorticity as a function of the stream value."""

    def __init__(self, s, w):
        self._p = PchipInterpolator(s, w, extrapolate=False)
        self._dp = self._p.derivative()
        self.lo, self.hi = float(s[0]), float(s[-1])
        self._wlo, self._whi = float(w[0]), float(w[-1])

    def __call__(self, s, n: int = 0):
        s = np.asarray(s, dtype=float)
        sc = np.clip(s, self.lo, self.hi)
        if n == 0:
            return self._p(sc)
        if n == 1:
            out = self._dp(sc)
            return np.where((s < self.lo) | (s > self.hi), 0.0, out)
        raise ValueError("only the fit and its first derivative are available")


def fit_vorticity_function(flow: EulerFlow):
    """Fit ``F`` from the inflow column and report the domain-wide consistency."""
    g = flow.grid
    phi = flow.phiE.values
    col = phi[0]
    if np.any(np.diff(col) <= 0):
        raise NonMonotone("stream function is not strictly increasing in Y at x = 0")
    d = flow.derivatives()
    w = -(d["u_Y"] - d["v_x"])  # -Lap phi
    fit = VorticityFit(col, w[0])
    mismatch = np.abs(w - fit(phi))
    report = {"max_consistency_residual": float(mismatch.max()),
              "stream_range": (fit.lo, fit.hi)}
    return fit, report


def build_euler_flow(L: float, nx: int, delta: float, shear: ShearSpec | None = None,
                     pert: PerturbationSpec | None = None, Y_max: float = 12.0,
                     nY: int = 481, tol: float = 1e-12) -> EulerFlow:
    """Convenience pipeline: grid, stream solve and field derivation."""
    shear = shear or canonical_shear()
    pert = pert or canonical_perturbation(delta, L)
    grid = euler_grid(L, nx, Y_max, nY)
    info = {}
    psi = solve_background_stream(shear, pert, grid, tol=tol, info=info)
    flow = derive_euler_fields(psi, shear, pert)
    flow.hypothesis_report["stream_solve"] = info
    return flow
