"""Numerical audits of the a-priori estimates for the remainder problem.

Each audit evaluates both sides of an inequality on concrete fields and
reports the fitted constant ``lhs / rhs``.  Verdicts are stability checks on
those constants (across refinement and across eps), never a literal ``<=``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import AuditPrecondition, PositivityLoss
from .grid_core import ScalarField, TensorGrid, d_axis, integrate, trapz_weights
from .smooth import Plateau

X_TERMS = ("uy_y", "ux_y", "v_grad", "second", "sup", "B_weighted", "B_ux")


def _l2(values, wx, wy) -> float:
    return float(np.sqrt(max(wx @ (values ** 2) @ wy, 0.0)))


def field_derivatives(f: ScalarField) -> dict:
    g = f.grid
    a = f.values
    ax = d_axis(a, g.x, 0)
    return {"f": a, "x": ax, "y": d_axis(a, g.y, 1), "xx": d_axis(a, g.x, 0, 2),
            "yy": d_axis(a, g.y, 1, 2), "xy": d_axis(ax, g.y, 1)}


def compute_X_norm(u: ScalarField, v: ScalarField, eps: float, gamma: float) -> dict:
    """The seven terms of the X-norm and their sum.

    Grouped terms such as ``||v_y, sqrt(eps) v_x||`` are the L2 norm of the vector.
    """
    g = u.grid
    if not g.same_nodes(v.grid):
        raise ValueError("u and v must share a grid")
    wx, wy = trapz_weights(g.x), trapz_weights(g.y)
    se = np.sqrt(eps)
    y = g.y[None, :]
    du, dv = field_derivatives(u), field_derivatives(v)
    hyp = lambda *t: float(np.sqrt(sum(s ** 2 for s in t)))
    terms = {
        "uy_y": _l2(du["y"] * y, wx, wy),
        "ux_y": _l2(se * du["x"] * y, wx, wy),
        "v_grad": hyp(_l2(dv["y"], wx, wy), _l2(se * dv["x"], wx, wy)),
        "second": hyp(_l2(du["yy"] * y, wx, wy), _l2(se * du["xy"] * y, wx, wy), _l2(eps * du["xx"] * y, wx, wy)),
        "sup": eps ** (gamma / 2) * max(float(np.abs(u.values).max()), se * float(np.abs(v.values).max())),
        "B_weighted": hyp(float(np.sqrt(wy @ (du["y"][-1] * g.y) ** 2)),
                          float(np.sqrt(wy @ (se * du["x"][-1] * g.y) ** 2))),
        "B_ux": float(np.sqrt(wy @ (se * du["x"][-1]) ** 2)),
    }
    terms["total"] = float(sum(terms[k] for k in X_TERMS))
    return terms


# ---------------------------------------------------------------------------
# reports

@dataclass
class InequalityReport:
    name: str
    lhs: float
    rhs: float
    context: dict = field(default_factory=dict)
    verdict: str = "n/a"
    details: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lhs < 0 or self.rhs < 0:
            raise ValueError(f"{self.name}: both sides must be non-negative")

    @property
    def fitted_constant(self) -> float:
        if self.rhs > 0:
            return self.lhs / self.rhs
        return 0.0 if self.lhs == 0 else float("inf")

    def row(self) -> dict:
        c = self.context
        return {"name": self.name, "eps": c.get("eps", ""), "nx": c.get("nx", ""), "ny": c.get("ny", ""),
                "lhs": self.lhs, "rhs": self.rhs, "fitted_constant": self.fitted_constant,
                "verdict": self.verdict}


CSV_COLUMNS = ("name", "eps", "nx", "ny", "lhs", "rhs", "fitted_constant", "verdict")


def export_reports_csv(path, reports) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        w.writeheader()
        for r in reports:
            row = r.row()
            w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in row.items()})


def stability_verdicts(reports, factor: float = 2.0) -> dict:
    """Group reports by name and compare the spread of fitted constants with ``factor``."""
    groups: dict = {}
    for r in reports:
        groups.setdefault(r.name, []).append(r.fitted_constant)
    out = {}
    for name, vals in groups.items():
        vals = np.asarray(vals, dtype=float)
        pos = vals[vals > 0]
        spread = float(pos.max() / pos.min()) if len(pos) else 1.0
        ok = bool(np.all(np.isfinite(vals)) and spread <= factor)
        out[name] = {"spread": spread, "passed": ok, "min": float(vals.min()), "max": float(vals.max())}
    for r in reports:
        r.verdict = "pass" if out[r.name]["passed"] else "fail"
    return out


def export_summary_svg(path, reports) -> None:
    """Bar chart of the fitted constants (log scale), one bar per report."""
    from .svgplot import bar_chart
    labels = [f"{r.name} eps={r.context.get('eps', '')} n={r.context.get('nx', '')}" for r in reports]
    bar_chart(path, labels, [r.fitted_constant for r in reports], title="fitted constants", log=True)


# ---------------------------------------------------------------------------
# helpers shared by the audits

@dataclass
class AuditFields:
    """Homogenised remainder with its right-hand sides and outflow data, all on the layer nodes."""

    u: ScalarField
    v: ScalarField
    f: np.ndarray
    g: np.ndarray
    aL: np.ndarray
    bL: np.ndarray
    aL_y: np.ndarray | None = None
    bL_y: np.ndarray | None = None

    @property
    def grid(self) -> TensorGrid:
        return self.u.grid

    def scaled(self, lam: float) -> "AuditFields":
        s = lambda a: None if a is None else lam * a
        return AuditFields(self.u.like(lam * self.u.values), self.v.like(lam * self.v.values),
                           lam * self.f, lam * self.g, lam * self.aL, lam * self.bL, s(self.aL_y), s(self.bL_y))

    def data_y(self):
        y = self.grid.y
        ay = self.aL_y if self.aL_y is not None else np.gradient(self.aL, y)
        by = self.bL_y if self.bL_y is not None else np.gradient(self.bL, y)
        return ay, by


def zero_fields(grid: TensorGrid) -> AuditFields:
    z = np.zeros(grid.shape)
    return AuditFields(ScalarField(grid, z), ScalarField(grid, z.copy()), z, z, np.zeros(grid.ny), np.zeros(grid.ny))


def weight_w(x) -> np.ndarray:
    """The x-weight ``w(x) = 1 - x`` of the weighted multiplier."""
    return 1.0 - np.asarray(x, dtype=float)


@dataclass
class MultiplierFields:
    beta: np.ndarray
    beta_x: np.ndarray
    beta_y: np.ndarray
    w: np.ndarray
    uyw_y: np.ndarray       # d_y {u y^2 w}
    uyw_x: np.ndarray       # d_x {u y^2 w}


def multipliers(u: ScalarField, v: ScalarField, us: np.ndarray) -> MultiplierFields:
    g = u.grid
    if float(us.min()) <= 0.0:
        raise PositivityLoss("beta multiplier", float(us.min()))
    beta = v.values / us
    w = weight_w(g.x)[:, None]
    y2 = g.y[None, :] ** 2
    q = u.values * y2 * w
    return MultiplierFields(beta, d_axis(beta, g.x, 0), d_axis(beta, g.y, 1), w[:, 0],
                            d_axis(q, g.y, 1), d_axis(q, g.x, 0))


def _integral(a, g: TensorGrid, mask=None) -> float:
    return integrate(a, g, mask)


def _boundary(a, g: TensorGrid) -> float:
    return float(trapz_weights(g.y) @ a)


def corner_mask(grid: TensorGrid, radius: int = 2) -> np.ndarray:
    """False inside ``radius`` cells of the outflow corner (x = L, y = 0)."""
    m = np.ones(grid.shape, dtype=bool)
    m[grid.nx - 1 - radius:, : radius + 1] = False
    return m


def check_boundary_conditions(fields: AuditFields, tol: float = 1e-8) -> float:
    """Largest Dirichlet trace relative to the field size; raises if above ``tol``."""
    u, v = fields.u.values, fields.v.values
    scale = max(float(np.abs(u).max()), float(np.abs(v).max()), 1e-300)
    traces = [u[0], v[0], u[:, 0], v[:, 0], u[:, -1], v[:, -1]]
    worst = max(float(np.abs(t).max()) for t in traces) / scale
    if worst > tol:
        raise AuditPrecondition(f"Dirichlet traces violated (relative size {worst:.2e})")
    return worst


def _context(g: TensorGrid, **extra) -> dict:
    return {"eps": g.eps, "nx": g.nx, "ny": g.ny, **extra}


# ---------------------------------------------------------------------------
# audits

def audit_energy(fields: AuditFields, us: np.ndarray, provenance: str = "") -> InequalityReport:
    """Energy estimate: ``||u_y||^2 + int_{x=L} u_s/2 (u^2 + eps v^2)`` against its right side."""
    check_boundary_conditions(fields)
    g = fields.grid
    eps = g.eps
    du, dv = field_derivatives(fields.u), field_derivatives(fields.v)
    u, v = du["f"], dv["f"]
    lhs = _integral(du["y"] ** 2, g) + _boundary(0.5 * us[-1] * (u[-1] ** 2 + eps * v[-1] ** 2), g)
    R1 = _integral(fields.f * u + eps * fields.g * v, g)
    grad_v = _integral(dv["y"] ** 2 + eps * dv["x"] ** 2, g)
    data = _boundary(fields.aL ** 2 + fields.bL ** 2, g)
    rhs = g.L * grad_v + abs(R1) + data
    return InequalityReport("energy", lhs, rhs, _context(g, provenance=provenance),
                            details={"R1": R1, "grad_v": grad_v, "data": data})


def outer_slope_bound(stack) -> float:
    """``||v0e / Y||_inf`` over the Eulerian grid (zero for shear flows)."""
    fg = stack.flow.grid
    v = stack.flow.derivatives()["v"]
    Y = fg.Y[None, 1:]
    return float(np.abs(v[:, 1:] / Y).max())


def audit_positivity(fields: AuditFields, us: np.ndarray, v_over_Y: float, provenance: str = "") -> InequalityReport:
    """Positivity estimate for ``beta = v / u_s`` plus the equivalence-lemma constant."""
    g = fields.grid
    eps = g.eps
    se = np.sqrt(eps)
    m = multipliers(fields.u, fields.v, us)
    du, dv = field_derivatives(fields.u), field_derivatives(fields.v)
    y = g.y[None, :]
    lhs = _integral(m.beta_y ** 2 + eps * m.beta_x ** 2, g) + _boundary(eps * dv["y"][-1] ** 2 / us[-1], g)
    R2 = -_integral(fields.f * m.beta_y, g) + eps * _integral(fields.g * m.beta_x, g)
    weighted = _integral((du["y"] * y) ** 2 + (se * dv["y"] * y) ** 2, g)
    _, by = fields.data_y()
    data = _boundary(fields.bL ** 2 + by ** 2 + fields.aL ** 2 / eps, g)
    rhs = _integral(du["y"] ** 2, g) + v_over_Y * weighted + abs(R2) + data
    grad_v = np.sqrt(_integral(dv["y"] ** 2 + eps * dv["x"] ** 2, g))
    grad_b = np.sqrt(_integral(m.beta_y ** 2 + eps * m.beta_x ** 2, g))
    usy = d_axis(us, g.y, 1)
    usx = d_axis(us, g.x, 0)
    formula = float(np.abs(us).max() + 2 * np.abs(g.y[None, :] * usy).max() + g.L * np.abs(usx).max())
    return InequalityReport("positivity", lhs, rhs, _context(g, provenance=provenance),
                            details={"R2": R2, "outer_term": v_over_Y * weighted, "data": data,
                                     "equivalence_constant": grad_v / grad_b if grad_b > 0 else 0.0,
                                     "equivalence_formula": formula})


def audit_equivalence(fields: AuditFields, us: np.ndarray, provenance: str = "") -> InequalityReport:
    """``||v_y, sqrt(eps) v_x||^2`` against ``||beta_y, sqrt(eps) beta_x||^2``."""
    g = fields.grid
    eps = g.eps
    m = multipliers(fields.u, fields.v, us)
    dv = field_derivatives(fields.v)
    lhs = _integral(dv["y"] ** 2 + eps * dv["x"] ** 2, g)
    rhs = _integral(m.beta_y ** 2 + eps * m.beta_x ** 2, g)
    return InequalityReport("equivalence", lhs, rhs, _context(g, provenance=provenance))


def audit_weighted(fields: AuditFields, provenance: str = "", radius: int = 2,
                   derivs: tuple[dict, dict] | None = None) -> InequalityReport:
    """Weighted second-order estimate with the outflow corner excluded."""
    g = fields.grid
    eps = g.eps
    se = np.sqrt(eps)
    du, dv = derivs or (field_derivatives(fields.u), field_derivatives(fields.v))
    y = g.y[None, :]
    yb = g.y
    mask = corner_mask(g, radius)
    w = weight_w(g.x)[:, None]
    q = du["f"] * y ** 2 * w
    q_y = d_axis(q, g.y, 1) if derivs is None else du["y"] * y ** 2 * w + 2 * du["f"] * y * w
    q_x = d_axis(q, g.x, 0) if derivs is None else (du["x"] * w - du["f"]) * y ** 2
    second = _integral(((du["yy"] * y) ** 2 + (se * du["xy"] * y) ** 2 + (eps * du["xx"] * y) ** 2), g, mask)
    first = _integral((du["y"] * y) ** 2 + (se * du["x"] * y) ** 2, g)
    edge = _boundary((du["y"][-1] * yb) ** 2 + (se * du["x"][-1] * yb) ** 2, g)
    lhs = second + first + edge
    fy = d_axis(fields.f, g.y, 1)
    gy = d_axis(fields.g, g.y, 1)
    R3 = _integral(fy * q_y - eps * gy * q_x, g, mask)
    ay, by = fields.data_y()
    jap2 = (1.0 + yb ** 2) ** 2
    data = _boundary((fields.aL ** 2 + ay ** 2 + fields.bL ** 2 + by ** 2) * jap2, g)
    rhs = (_integral(du["y"] ** 2, g) + _integral(dv["y"] ** 2 + eps * dv["x"] ** 2, g)
           + _boundary(eps * du["x"][-1] ** 2, g) + data + abs(R3))
    # flux through the truncation boundary y = y_max (absent on the half-line); diagnostic only
    top_flux = float(trapz_weights(g.x) @ ((du["y"][:, -1] ** 2 + np.abs(du["yy"][:, -1] * du["y"][:, -1]))
                                           * g.y[-1] ** 2 * w[:, 0]))
    return InequalityReport("weighted", lhs, rhs, _context(g, provenance=provenance, corner_radius=radius),
                            details={"R3": R3, "second": second, "first": first, "edge": edge,
                                     "top_flux": top_flux})


def korn_terms(derivs: dict, grid: TensorGrid, eps: float, mask=None) -> dict:
    """The three integrals of the scaled Korn inequality for one field."""
    y2 = grid.y[None, :] ** 2
    w = weight_w(grid.x)[:, None]
    yy, xy, xx, uy, ux = derivs["yy"], derivs["xy"], derivs["xx"], derivs["y"], derivs["x"]
    lhs = _integral((yy ** 2 + 4 * eps * xy ** 2 + eps ** 2 * xx ** 2 - 2 * eps * yy * xx) * y2 * w, grid, mask)
    full = _integral((yy ** 2 + eps * xy ** 2 + eps ** 2 * xx ** 2) * y2 * w, grid, mask)
    lower = (eps * _integral((uy ** 2 + eps * ux ** 2) * y2, grid, mask)
             + _integral(uy ** 2 + ux ** 2, grid, mask))
    return {"lhs": lhs, "full": full, "lower": lower}


def korn_constant(terms: dict) -> float:
    """Largest ``c <= 1`` with ``lhs >= c full - lower``."""
    if terms["full"] <= 0:
        return 1.0
    return float(min(1.0, (terms["lhs"] + terms["lower"]) / terms["full"]))


def random_korn_field(grid: TensorGrid, rng: np.random.Generator, n_bumps: int = 3) -> np.ndarray:
    """Sum of Gaussian bumps in ``y >= 1`` (smoothly cut off below) with random x-modulation."""
    X, Y = grid.mesh()
    cut = 1.0 - Plateau(1.0, 1.5)(grid.y)[None, :]
    out = np.zeros(grid.shape)
    for _ in range(n_bumps):
        yc = rng.uniform(2.0, 0.6 * grid.y_max)
        sy = rng.uniform(0.4, 2.0)
        kx = rng.uniform(0.0, 3.0) * np.pi / grid.L
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.normal()
        out += amp * np.exp(-((Y - yc) / sy) ** 2) * np.cos(kx * X + phase) * (1 + rng.normal() * X)
    return out * cut


def audit_korn(u: ScalarField, grid: TensorGrid | None = None, eps: float | None = None,
               n_fields: int = 200, seed: int = 12345, radius: int = 2) -> InequalityReport:
    """Korn inequality: constant for ``u`` plus the worst constant over random smooth fields.

    The report's sides are ``lhs + lower`` and ``full``, so its fitted constant is
    the largest ``c`` (uncapped) for which the inequality holds on ``u``.
    """
    grid = grid or u.grid
    eps = eps if eps is not None else grid.eps
    mask = corner_mask(grid, radius)
    t = korn_terms(field_derivatives(u), grid, eps, mask)
    c_field = korn_constant(t)
    rng = np.random.default_rng(seed)
    cs = []
    for _ in range(n_fields):
        f = ScalarField(grid, random_korn_field(grid, rng))
        cs.append(korn_constant(korn_terms(field_derivatives(f), grid, eps, mask)))
    c_min = float(min(cs)) if cs else c_field
    # fitted constant = the uncapped Korn constant of u: (lhs + lower) / full
    lhs = max(t["lhs"] + t["lower"], 0.0)
    rhs = t["full"]
    rep = InequalityReport("korn", lhs, rhs, _context(grid, seed=seed, n_fields=n_fields),
                           details={"c_field": c_field, "c_random_min": c_min, "c_random": cs,
                                    **{k: t[k] for k in t}})
    return rep


def korn_measured_constant(rep: InequalityReport) -> float:
    return float(min(rep.details["c_field"], rep.details["c_random_min"]))


def adversarial_korn(grid: TensorGrid, eps: float, a_values, b_values, radius: int = 2) -> dict:
    """Scan ``u = sin(a y) sin(b x) * cutoff`` and return the worst constant and its frequencies."""
    X, Y = grid.mesh()
    cut = (1.0 - Plateau(1.0, 1.5)(grid.y)[None, :]) * np.exp(-((Y - 0.5 * grid.y_max) / (0.25 * grid.y_max)) ** 2)
    mask = corner_mask(grid, radius)
    worst = (np.inf, None, None, None)
    for a in a_values:
        for b in b_values:
            f = ScalarField(grid, np.sin(a * Y) * np.sin(b * X) * cut)
            t = korn_terms(field_derivatives(f), grid, eps, mask)
            margin = t["lhs"] - (-t["lower"])
            c = korn_constant(t)
            if c < worst[0]:
                worst = (c, a, b, margin)
    return {"c": worst[0], "a": worst[1], "b": worst[2], "lhs_plus_lower": worst[3]}


def audit_nonlinear_and_forcing(fields: AuditFields, previous: AuditFields, us: np.ndarray, gamma: float,
                                forcing_R: tuple | None = None, Lb: tuple | None = None,
                                provenance: str = "") -> list[InequalityReport]:
    """Nonlinear pairings against ``eps^(gamma/2) ||ubar||_X^2 ||u||_X`` and forcing pairings.

    ``forcing_R`` is ``(eps^(-1/2-gamma) R^{u,1}, eps^(-1/2-gamma) R^{v,1})`` on nodes;
    ``Lb`` the homogenisation forcing on nodes.
    """
    g = fields.grid
    eps = g.eps
    s = eps ** (0.5 + gamma)
    ub, vb = field_derivatives(previous.u), field_derivatives(previous.v)
    du = field_derivatives(fields.u)
    m = multipliers(fields.u, fields.v, us)
    Nu = s * (ub["f"] * ub["x"] + vb["f"] * ub["y"])
    Nv = s * (ub["f"] * vb["x"] + vb["f"] * vb["y"])
    dNu = s * (ub["f"] * ub["xy"] + vb["f"] * ub["yy"])
    dNv = s * (ub["y"] * vb["x"] + ub["f"] * vb["xy"] + vb["y"] ** 2 + vb["f"] * vb["yy"])
    Xu = compute_X_norm(fields.u, fields.v, eps, gamma)["total"]
    Xb = compute_X_norm(previous.u, previous.v, eps, gamma)["total"]
    bound = eps ** (gamma / 2) * Xb ** 2 * Xu
    ctx = _context(g, provenance=provenance)
    reps = [
        InequalityReport("nonlinear_weighted",
                         abs(_integral(dNu * m.uyw_y, g)) + abs(_integral(dNv * eps * m.uyw_x, g)), bound, ctx),
        InequalityReport("nonlinear_energy", abs(_integral(Nu * du["f"] + eps * Nv * fields.v.values, g)), bound, ctx),
        InequalityReport("nonlinear_positivity",
                         abs(_integral(-Nu * m.beta_y, g)) + abs(_integral(eps * Nv * m.beta_x, g)), bound, ctx),
    ]

    def pairings(F, G):
        Fy, Gy = d_axis(F, g.y, 1), d_axis(G, g.y, 1)
        return (abs(_integral(F * du["f"] + eps * G * fields.v.values, g))
                + abs(_integral(-F * m.beta_y + eps * G * m.beta_x, g))
                + abs(_integral(Fy * m.uyw_y, g)) + abs(_integral(eps * Gy * m.uyw_x, g)))

    if forcing_R is not None:
        reps.append(InequalityReport("forcing_residual", pairings(*forcing_R), Xu, ctx,
                                     details={"eps_rate": eps ** (0.25 - gamma)}))
    if Lb is not None:
        reps.append(InequalityReport("forcing_lift", pairings(*Lb), Xu, ctx))
    return reps
