"""Command-line orchestration: profiles, remainder solves, eps-sweeps and audits.

Every verb reads one INI-style config file.  ``--set section.key=value`` and
the dedicated flags override config keys; the environment variable
``BLAYER_OUTPUT`` may only move the output root.  Outputs land in
``<root>/fields/<case>/*.fld``, ``<root>/tables/*.csv``, ``<root>/plots/*.svg``
and ``<root>/manifest.txt``.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import io
import logging
import os
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path
from types import MappingProxyType

import numpy as np
import scipy
from scipy import stats

from . import __version__
from .errors import (ArtifactError, AuditPrecondition, ConfigError, FormatError, MissingArtifact,
                     NoContraction, SingularSystem, SolveFailure)
from .estimate_auditor import (AuditFields, InequalityReport, audit_energy, audit_equivalence, audit_korn,
                               audit_nonlinear_and_forcing, audit_positivity, audit_weighted,
                               export_reports_csv, export_summary_svg, outer_slope_bound,
                               stability_verdicts)
from .euler0_builder import (build_euler_flow, canonical_perturbation, canonical_shear,
                             uniform_shear, verify_euler_hypotheses, zero_perturbation)
from .grid_core import ScalarField, TensorGrid, build_grid, load_field, save_field
from .prandtl1_solver import ChiCutoff, cutoff_norm
from .profile_assembly import LayerStack, build_stack, certify_profile_bounds
from .remainder_solver import (BoundaryData, SolverOptions, audit_fields, bump_boundary_data,
                               canonical_boundary_data, picard_iterate, remainder_problem, solve_full_ns)

log = logging.getLogger("artifact.cli")

ENV_OUTPUT = "BLAYER_OUTPUT"
EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_AUDIT = 0, 2, 3, 4

DEFAULT_CONFIG = """\
[grid]
L = 0.25
y_max = 30
nx = 161
ny = 161
stretch = 2
refinement = 1.5

[physics]
eps = 1e-2, 3e-3, 1e-3, 3e-4
gamma = 0.125
ub = 2.0
delta = 0.05

[flow]
shear = canonical
perturbation = canonical
boundary_data = zero

[solver]
tol = 1e-9
alpha = 0
max_iter = 60
damping = 1
workers = 1

[audit]
seed = 12345
korn_fields = 200
stability_factor = 2

[output]
directory = blayer-out
formats = fld, csv, svg
"""

SHEARS = {"canonical": canonical_shear, "uniform": uniform_shear}
PERTURBATIONS = {"canonical": canonical_perturbation,
                 "zero": lambda delta, L: zero_perturbation(L, delta)}
BOUNDARY_DATA = {"zero": canonical_boundary_data, "bump": bump_boundary_data}
STABILITY_FAMILIES = ("energy", "positivity", "weighted", "korn")
FORMATS = ("fld", "csv", "svg")


# ---------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class RunConfig:
    L: float = 0.25
    y_max: float = 30.0
    nx: int = 161
    ny: int = 161
    stretch: float = 2.0
    refinement: float = 1.5
    eps: tuple = (1e-2, 3e-3, 1e-3, 3e-4)
    gamma: float = 0.125
    ub: float = 2.0
    delta: float = 0.05
    shear: str = "canonical"
    perturbation: str = "canonical"
    boundary_data: str = "zero"
    tol: float = 1e-9
    alpha: float = 0.0
    max_iter: int = 60
    damping: float = 1.0
    workers: int = 1
    seed: int = 12345
    korn_fields: int = 200
    stability_factor: float = 2.0
    directory: str = "blayer-out"
    formats: tuple = FORMATS

    def validate(self) -> "RunConfig":
        checks = [
            (0 < self.L <= 1, "grid.L must lie in (0, 1]"),
            (self.y_max > 1, "grid.y_max must exceed 1"),
            (self.nx >= 9 and self.ny >= 9, "grid.nx and grid.ny must be at least 9"),
            (self.stretch >= 1, "grid.stretch must be >= 1"),
            (self.refinement > 1, "grid.refinement must exceed 1"),
            (len(self.eps) >= 1 and all(0 < e < 1 for e in self.eps), "physics.eps values must lie in (0, 1)"),
            (all(a > b for a, b in zip(self.eps, self.eps[1:])), "physics.eps must be sorted descending"),
            (0 < self.gamma < 0.25, "physics.gamma must lie in (0, 1/4)"),
            (self.ub > 0, "physics.ub must be positive"),
            (self.delta >= 0, "physics.delta must be non-negative"),
            (self.shear in SHEARS, f"flow.shear must be one of {sorted(SHEARS)}"),
            (self.perturbation in PERTURBATIONS, f"flow.perturbation must be one of {sorted(PERTURBATIONS)}"),
            (self.boundary_data in BOUNDARY_DATA, f"flow.boundary_data must be one of {sorted(BOUNDARY_DATA)}"),
            (self.tol > 0, "solver.tol must be positive"),
            (self.alpha >= 0, "solver.alpha must be >= 0"),
            (self.max_iter >= 1, "solver.max_iter must be >= 1"),
            (0 < self.damping <= 1, "solver.damping must lie in (0, 1]"),
            (self.workers >= 1, "solver.workers must be >= 1"),
            (0 <= self.seed < 2 ** 64, "audit.seed must be a 64-bit unsigned integer"),
            (self.korn_fields >= 1, "audit.korn_fields must be >= 1"),
            (self.stability_factor > 1, "audit.stability_factor must exceed 1"),
            (bool(self.directory), "output.directory must not be empty"),
            (set(self.formats) <= set(FORMATS), f"output.formats must be a subset of {FORMATS}"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self

    @property
    def output(self) -> Path:
        return Path(self.directory)

    def grids(self) -> list[tuple[int, int]]:
        """Base grid and one refinement (node counts keep the cell structure)."""
        r = lambda n: int(round((n - 1) * self.refinement)) + 1
        return [(self.nx, self.ny), (r(self.nx), r(self.ny))]

    def grid(self, eps: float, n: tuple[int, int] | None = None) -> TensorGrid:
        nx, ny = n or (self.nx, self.ny)
        return build_grid(self.L, self.y_max, nx, ny, self.stretch, eps)

    def solver_options(self) -> SolverOptions:
        return SolverOptions(alpha=self.alpha, damping=self.damping, tol=self.tol, max_iter=self.max_iter)

    def to_ini(self) -> str:
        """Canonical text form; its hash identifies the run."""
        cp = configparser.ConfigParser()
        cp.optionxform = str
        for section, keys in _SECTIONS.items():
            cp[section] = {k: _format_value(getattr(self, k)) for k in keys}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def digest(self) -> str:
        return hashlib.sha256(self.to_ini().encode()).hexdigest()


_SECTIONS = {
    "grid": ("L", "y_max", "nx", "ny", "stretch", "refinement"),
    "physics": ("eps", "gamma", "ub", "delta"),
    "flow": ("shear", "perturbation", "boundary_data"),
    "solver": ("tol", "alpha", "max_iter", "damping", "workers"),
    "audit": ("seed", "korn_fields", "stability_factor"),
    "output": ("directory", "formats"),
}
_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _format_value(v) -> str:
    if isinstance(v, tuple):
        return ", ".join(_format_value(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def _parse_value(key: str, raw: str):
    kind = _TYPES[key]
    raw = raw.strip()
    try:
        if key == "eps":
            return tuple(float(s) for s in raw.split(",") if s.strip())
        if key == "formats":
            return tuple(s.strip() for s in raw.split(",") if s.strip())
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"cannot parse {key} = {raw!r}: {exc}") from None


def load_config(path=None, overrides: dict | None = None, env=None) -> RunConfig:
    """Read ``path`` (defaults when None), apply ``{"section.key": value}`` overrides and the env root."""
    env = os.environ if env is None else env
    cp = configparser.ConfigParser()
    cp.optionxform = str
    cp.read_string(DEFAULT_CONFIG)
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            cp.read_string(path.read_text())
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
    if env.get(ENV_OUTPUT):
        cp["output"]["directory"] = env[ENV_OUTPUT]
    for dotted, value in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        if section not in _SECTIONS or key not in _SECTIONS[section]:
            raise ConfigError(f"unknown config key {dotted!r}")
        cp[section][key] = str(value)
    values = {}
    for section, keys in _SECTIONS.items():
        for key in keys:
            values[key] = _parse_value(key, cp[section][key])
        unknown = set(cp[section]) - set(keys)
        if unknown:
            raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    extra = set(cp.sections()) - set(_SECTIONS)
    if extra:
        raise ConfigError(f"unknown config sections: {sorted(extra)}")
    return RunConfig(**values).validate()


# ---------------------------------------------------------------------------
# run bookkeeping

class Manifest:
    """Per-stage wall times plus the config hash and library versions."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.stages: list[tuple[str, float, str]] = []

    def timed(self, name: str):
        manifest = self

        class _Stage:
            def __enter__(self):
                self.t0 = time.perf_counter()
                return self

            def __exit__(self, exc_type, exc, tb):
                status = "ok" if exc_type is None else f"failed ({exc_type.__name__})"
                manifest.stages.append((name, time.perf_counter() - self.t0, status))
                if exc is not None and not hasattr(exc, "stage"):
                    exc.stage = name
                return False

        return _Stage()

    def write(self, root: Path) -> Path:
        root.mkdir(parents=True, exist_ok=True)
        lines = [f"config_sha256 = {self.cfg.digest()}",
                 f"artifact = {__version__}",
                 f"python = {platform.python_version()}",
                 f"numpy = {np.__version__}",
                 f"scipy = {scipy.__version__}",
                 "", "[stages]"]
        lines += [f"{name} = {dt:.3f}s {status}" for name, dt, status in self.stages]
        lines += ["", "[config]", self.cfg.to_ini().strip()]
        path = root / "manifest.txt"
        path.write_text("\n".join(lines) + "\n")
        return path


def case_name(eps: float, grid: tuple[int, int]) -> str:
    return f"eps{eps:.0e}_n{grid[0]}x{grid[1]}"


def _write_csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([f"{v:.10g}" if isinstance(v, float) else v for v in row])


# ---------------------------------------------------------------------------
# profiles

def make_flow(cfg: RunConfig, nx: int):
    """Leading-order Euler flow with its hypotheses verified."""
    shear = SHEARS[cfg.shear]()
    pert = PERTURBATIONS[cfg.perturbation](cfg.delta, cfg.L)
    flow = build_euler_flow(cfg.L, nx, cfg.delta, shear=shear, pert=pert)
    verify_euler_hypotheses(flow)
    return flow


def build_case_stack(cfg: RunConfig, eps: float, n: tuple[int, int], flow=None, e1=None) -> LayerStack:
    flow = flow or make_flow(cfg, n[0])
    return build_stack(flow, cfg.grid(eps, n), ub=cfg.ub, gamma=cfg.gamma, chi=ChiCutoff(), e1=e1)


def persist_profiles(stack: LayerStack, case_dir: Path) -> list[Path]:
    """All layer fields plus the assembled profile and residuals."""
    case_dir.mkdir(parents=True, exist_ok=True)
    items = {"euler0_u": stack.flow.u0e, "euler0_v": stack.flow.v0e, "euler0_P": stack.flow.P0e,
             "euler0_psi": stack.flow.psi, "prandtl0_u": stack.p0.u0p, "prandtl0_v": stack.p0.v0p,
             "euler1_u": stack.e1.u1e, "euler1_v": stack.e1.v1e, "euler1_P": stack.e1.P1e,
             "prandtl1_u": stack.p1.u1p, "prandtl1_v": stack.p1.v1p, "prandtl1_cutoff": stack.p1.Rup,
             "profile_us": stack.us, "profile_vs": stack.vs, "profile_Ps": stack.Ps,
             "profile_P2p": stack.P2p, "residual_u": stack.Ru1, "residual_v": stack.Rv1}
    paths = []
    for name, f in items.items():
        p = case_dir / f"{name}.fld"
        save_field(p, f)
        paths.append(p)
    return paths


def profile_row(stack: LayerStack) -> list:
    bounds = certify_profile_bounds(stack)
    res = stack.report["residual"]
    cut = cutoff_norm(stack.p1, stack.p0, stack.parts["chi"], stack.eps)
    return [stack.eps, stack.grid.nx, stack.grid.ny, bounds.min_us, res["total"],
            stack.report["relative_mismatch"], cut["total"],
            max(bounds.sups.values()), "pass" if bounds.passed else "fail"]


PROFILE_COLUMNS = ("eps", "nx", "ny", "min_us", "residual_total", "relative_mismatch", "cutoff_total",
                   "max_uniform_bound", "certified")


def run_build_profiles(cfg: RunConfig, manifest: Manifest | None = None) -> dict:
    """Build and persist the layer stack for every eps on the base grid."""
    manifest = manifest or Manifest(cfg)
    root = cfg.output
    with manifest.timed("euler0_builder"):
        flow = make_flow(cfg, cfg.nx)
    stacks, rows, e1 = {}, [], None
    for eps in cfg.eps:
        with manifest.timed(f"build_profiles eps={eps:g}"):
            st = build_case_stack(cfg, eps, (cfg.nx, cfg.ny), flow, e1)
            e1 = st.e1
            if "fld" in cfg.formats:
                persist_profiles(st, root / "fields" / case_name(eps, (cfg.nx, cfg.ny)))
            rows.append(profile_row(st))
            stacks[eps] = st
    if "csv" in cfg.formats:
        _write_csv(root / "tables" / "profiles.csv", PROFILE_COLUMNS, rows)
    return stacks


# ---------------------------------------------------------------------------
# remainder solves

@dataclass(frozen=True)
class CaseRecord:
    """One (eps, grid) outcome of the remainder pipeline."""

    eps: float
    nx: int
    ny: int
    status: str
    items: tuple = ()

    @property
    def values(self) -> dict:
        return dict(self.items)

    def __getitem__(self, key):
        return self.values[key]


RECORD_COLUMNS = ("residual_L2", "residual_weighted", "residual_total", "relative_mismatch", "cutoff_total",
                  "x_norm", "contraction_factor", "picard_iterations", "u_error", "v_error",
                  "divergence", "min_us")


def persist_audit_inputs(case_dir: Path, stack: LayerStack, fields_: AuditFields, Lb: tuple,
                         forcing_R: tuple, v_over_Y: float) -> None:
    """Everything ``run_audits`` needs, so audits can run from disk alone."""
    case_dir.mkdir(parents=True, exist_ok=True)
    g = fields_.grid
    for name, arr in (("remainder_u", fields_.u.values), ("remainder_v", fields_.v.values),
                      ("remainder_f", fields_.f), ("remainder_g", fields_.g),
                      ("lift_forcing_u", Lb[0]), ("lift_forcing_v", Lb[1]),
                      ("scaled_residual_u", forcing_R[0]), ("scaled_residual_v", forcing_R[1]),
                      ("profile_us", stack.us.values)):
        save_field(case_dir / f"{name}.fld", ScalarField(g, arr))
    ay, by = fields_.data_y()
    _write_csv(case_dir / "outflow_data.csv", ("y", "aL", "bL", "aL_y", "bL_y"),
               [tuple(float(c) for c in r) for r in zip(g.y, fields_.aL, fields_.bL, ay, by)])
    (case_dir / "case.txt").write_text(f"gamma = {stack.gamma!r}\nv_over_Y = {v_over_Y!r}\n")


def solve_case(cfg: RunConfig, eps: float, n: tuple[int, int], stack: LayerStack | None = None,
               persist: bool = True) -> CaseRecord:
    """Build (if needed), solve the remainder, persist fields, return the record."""
    root = cfg.output
    stack = stack or build_case_stack(cfg, eps, n)
    bd = BOUNDARY_DATA[cfg.boundary_data](eps)
    problem = remainder_problem(stack, bd, cfg.solver_options())
    state = picard_iterate(problem)
    full = solve_full_ns(stack, bd, state, problem.homogenizer)
    mac = state.mac
    af = audit_fields(state, problem.homogenizer)
    Lb_u, Lb_v = problem.homogenizer.forcing(problem.system.ops, state.u.ravel(), state.v.ravel())
    Lb = (mac.u_values_to_nodes(np.reshape(Lb_u, mac.u_shape)),
          mac.v_values_to_nodes(np.reshape(Lb_v, mac.v_shape)))
    scale = eps ** (-0.5 - stack.gamma)
    forcing_R = (scale * stack.Ru1.values, scale * stack.Rv1.values)
    case_dir = root / "fields" / case_name(eps, n)
    if persist and "fld" in cfg.formats:
        persist_audit_inputs(case_dir, stack, af, Lb, forcing_R, outer_slope_bound(stack))
        for name, f in (("remainder_P", ScalarField(stack.grid, mac.p_to_nodes(state.P))),
                        ("ns_U", full.U), ("ns_V", full.V)):
            save_field(case_dir / f"{name}.fld", f)
    if persist and "csv" in cfg.formats:
        _write_csv(root / "tables" / f"picard_{case_name(eps, n)}.csv",
                   ("iter", "x_norm", "update_norm", "contraction_factor"), state.ledger_rows())
    res = stack.report["residual"]
    cut = cutoff_norm(stack.p1, stack.p0, stack.parts["chi"], eps)
    values = {"residual_L2": res["L2"], "residual_weighted": res["weighted"], "residual_total": res["total"],
              "relative_mismatch": stack.report["relative_mismatch"], "cutoff_total": cut["total"],
              "x_norm": state.norm_report["total"],
              "contraction_factor": state.norm_report["contraction_factor"],
              "picard_iterations": len(state.ledger), "u_error": full.u_error, "v_error": full.v_error,
              "divergence": float(np.abs(state.divergence()).max()), "min_us": float(stack.us.values.min())}
    return CaseRecord(eps, n[0], n[1], "ok", tuple(values.items()))


def _solve_job(args) -> CaseRecord:
    cfg, eps, n = args
    try:
        return solve_case(cfg, eps, n)
    except ArtifactError as exc:
        log.error("eps=%g grid=%s: %s: %s", eps, n, type(exc).__name__, exc)
        return CaseRecord(eps, n[0], n[1], f"failed: {type(exc).__name__}: {exc}")


def run_solve_remainder(cfg: RunConfig, grids=None, manifest: Manifest | None = None) -> list[CaseRecord]:
    """Solve every (eps, grid) case; each failure is recorded, the rest still run."""
    manifest = manifest or Manifest(cfg)
    grids = grids or cfg.grids()
    jobs = [(cfg, eps, n) for n in grids for eps in cfg.eps]
    with manifest.timed("solve_remainder"):
        if cfg.workers > 1:
            with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
                records = list(pool.map(_solve_job, jobs))
        else:
            records = [_solve_job(j) for j in jobs]
    if "csv" in cfg.formats:
        write_records(cfg.output / "tables" / "remainder.csv", records)
    return records


def write_records(path: Path, records) -> None:
    rows = [[r.eps, r.nx, r.ny, r.status] + [r.values.get(k, "") for k in RECORD_COLUMNS] for r in records]
    _write_csv(path, ("eps", "nx", "ny", "status") + RECORD_COLUMNS, rows)


# ---------------------------------------------------------------------------
# convergence study

@dataclass(frozen=True)
class SlopeFit:
    quantity: str
    slope: float
    intercept: float
    stderr: float
    ci_low: float
    ci_high: float
    n_points: int


def fit_slope(quantity: str, eps, values, confidence: float = 0.95) -> SlopeFit:
    """Least-squares slope of ``log10 value`` against ``log10 eps`` with a t-interval."""
    eps = np.asarray(eps, dtype=float)
    values = np.asarray(values, dtype=float)
    if len(eps) < 3:
        raise ValueError("slope fits need at least 3 eps values")
    if np.any(values <= 0):
        raise ValueError(f"{quantity}: log-log fit needs positive values")
    r = stats.linregress(np.log10(eps), np.log10(values))
    half = stats.t.ppf(0.5 + confidence / 2, len(eps) - 2) * r.stderr
    return SlopeFit(quantity, float(r.slope), float(r.intercept), float(r.stderr),
                    float(r.slope - half), float(r.slope + half), len(eps))


@dataclass(frozen=True)
class SweepResult:
    records: tuple
    slopes: MappingProxyType

    def ok_records(self) -> tuple:
        return tuple(r for r in self.records if r.status == "ok")

    def column(self, key: str) -> np.ndarray:
        return np.array([r[key] for r in self.ok_records()])


SLOPE_QUANTITIES = {"u_error": "||U - u0e - u0p||_inf", "v_error": "||V - v0e||_inf",
                    "residual_total": "residual norm", "cutoff_total": "cutoff remainder"}


def run_convergence_study(cfg: RunConfig, records=None, manifest: Manifest | None = None) -> SweepResult:
    """Per-eps records on the base grid, log-log slopes with CIs, CSV and SVG output."""
    if len(cfg.eps) < 3:
        raise ConfigError("a convergence study needs at least 3 eps values")
    manifest = manifest or Manifest(cfg)
    base = (cfg.nx, cfg.ny)
    if records is None:
        records = run_solve_remainder(cfg, grids=[base], manifest=manifest)
    records = tuple(r for r in records if (r.nx, r.ny) == base)
    root = cfg.output
    if "csv" in cfg.formats:
        write_records(root / "tables" / "sweep.csv", records)
    ok = [r for r in records if r.status == "ok"]
    slopes = {}
    if len(ok) >= 3:
        eps = [r.eps for r in ok]
        for q in SLOPE_QUANTITIES:
            slopes[q] = fit_slope(q, eps, [r[q] for r in ok])
    else:
        log.warning("only %d eps values succeeded; slopes not fitted", len(ok))
    result = SweepResult(records, MappingProxyType(slopes))
    if "csv" in cfg.formats and slopes:
        _write_csv(root / "tables" / "slopes.csv",
                   ("quantity", "slope", "intercept", "stderr", "ci_low", "ci_high", "n_points"),
                   [[s.quantity, s.slope, s.intercept, s.stderr, s.ci_low, s.ci_high, s.n_points]
                    for s in slopes.values()])
    if "svg" in cfg.formats and slopes:
        from .svgplot import loglog_plot
        eps = [r.eps for r in ok]
        series = {q: (eps, [r[q] for r in ok]) for q in slopes}
        fits = {q: (s.slope, s.intercept) for q, s in slopes.items()}
        loglog_plot(root / "plots" / "convergence.svg", series, fits,
                    title="eps-sweep: errors, residual and cutoff", ylabel="norm")
    if len(ok) < len(records):
        raise SolveFailure(f"{len(records) - len(ok)} eps value(s) failed; partial results written")
    return result


# ---------------------------------------------------------------------------
# audits

@dataclass
class AuditInputs:
    fields: AuditFields
    us: np.ndarray
    lift_forcing: tuple
    scaled_residual: tuple
    gamma: float
    v_over_Y: float


def zero_audit_inputs(grid: TensorGrid, gamma: float = 0.125) -> AuditInputs:
    """Synthetic all-zero remainder over a uniform unit profile."""
    from .estimate_auditor import zero_fields
    z = np.zeros(grid.shape)
    return AuditInputs(zero_fields(grid), np.ones(grid.shape), (z, z), (z, z), gamma, 0.0)


def load_audit_inputs(case_dir: Path) -> AuditInputs:
    """Read one persisted case; raises MissingArtifact or FormatError before anything is computed."""
    case_dir = Path(case_dir)
    names = ("remainder_u", "remainder_v", "remainder_f", "remainder_g", "lift_forcing_u", "lift_forcing_v",
             "scaled_residual_u", "scaled_residual_v", "profile_us")
    paths = [case_dir / f"{n}.fld" for n in names] + [case_dir / "outflow_data.csv", case_dir / "case.txt"]
    for p in paths:
        if not p.is_file():
            raise MissingArtifact(str(p))
    f = {n: load_field(case_dir / f"{n}.fld") for n in names}
    grid = f["remainder_u"].grid
    if any(x.grid != grid for x in f.values()):
        raise FormatError(f"{case_dir}: fields on different grids")
    try:
        table = np.loadtxt(case_dir / "outflow_data.csv", delimiter=",", skiprows=1, ndmin=2)
        meta = dict(line.split(" = ") for line in (case_dir / "case.txt").read_text().splitlines() if line)
        gamma, v_over_Y = float(meta["gamma"]), float(meta["v_over_Y"])
    except (ValueError, KeyError) as exc:
        raise FormatError(f"{case_dir}: {exc}") from None
    if table.shape != (grid.ny, 5):
        raise FormatError(f"{case_dir / 'outflow_data.csv'}: expected {grid.ny} rows of 5 columns")
    af = AuditFields(f["remainder_u"], f["remainder_v"], f["remainder_f"].values, f["remainder_g"].values,
                     table[:, 1], table[:, 2], table[:, 3], table[:, 4])
    return AuditInputs(af, f["profile_us"].values,
                       (f["lift_forcing_u"].values, f["lift_forcing_v"].values),
                       (f["scaled_residual_u"].values, f["scaled_residual_v"].values), gamma, v_over_Y)


def audit_case(inp: AuditInputs, seed: int = 12345, korn_fields: int = 200, provenance: str = "") -> list:
    """All seven audit families on one case."""
    af, us = inp.fields, inp.us
    reps = [audit_energy(af, us, provenance),
            audit_positivity(af, us, inp.v_over_Y, provenance),
            audit_equivalence(af, us, provenance),
            audit_weighted(af, provenance),
            audit_korn(af.u, n_fields=korn_fields, seed=seed)]
    # at the Picard fixed point consecutive iterates coincide, so the converged state is its own predecessor
    reps += audit_nonlinear_and_forcing(af, af, us, inp.gamma, inp.scaled_residual, inp.lift_forcing,
                                        provenance)
    return reps


@dataclass
class AuditBundle:
    reports: list
    verdicts: dict

    @property
    def passed(self) -> bool:
        return all(v["passed"] for v in self.verdicts.values())


def judge(reports, factor: float = 2.0) -> dict:
    """Stability verdicts for the four inequality families; the others are reported as info."""
    stable = [r for r in reports if r.name in STABILITY_FAMILIES]
    verdicts = stability_verdicts(stable, factor)
    for r in reports:
        if r.name not in STABILITY_FAMILIES:
            r.verdict = "info"
    return verdicts


def run_audits(cfg: RunConfig, case_dirs=None, manifest: Manifest | None = None) -> AuditBundle:
    """Audit every persisted case (eps list x two grids) and write the consolidated report."""
    manifest = manifest or Manifest(cfg)
    root = cfg.output
    if case_dirs is None:
        case_dirs = [root / "fields" / case_name(eps, n) for n in cfg.grids() for eps in cfg.eps]
    with manifest.timed("load_audit_inputs"):
        inputs = [(Path(d), load_audit_inputs(d)) for d in case_dirs]
    reports = []
    with manifest.timed("audits"):
        for d, inp in inputs:
            reports += audit_case(inp, cfg.seed, cfg.korn_fields, provenance=d.name)
    verdicts = judge(reports, cfg.stability_factor)
    if "csv" in cfg.formats:
        export_reports_csv(root / "tables" / "audits.csv", reports)
        _write_csv(root / "tables" / "audit_summary.csv", ("name", "spread", "min", "max", "verdict"),
                   [[n, v["spread"], v["min"], v["max"], "pass" if v["passed"] else "fail"]
                    for n, v in sorted(verdicts.items())])
    if "svg" in cfg.formats:
        export_summary_svg(root / "plots" / "audits.svg", reports)
    return AuditBundle(reports, verdicts)


# ---------------------------------------------------------------------------
# command line

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="blayer", description="Boundary-layer expansion and remainder pipeline.")
    p.add_argument("verb", choices=("build-profiles", "solve-remainder", "convergence-study", "audit", "all"))
    p.add_argument("--config", help="INI config file (defaults are built in)")
    p.add_argument("--eps", help="comma-separated eps list, overrides physics.eps")
    p.add_argument("--nx", type=int, help="overrides grid.nx")
    p.add_argument("--ny", type=int, help="overrides grid.ny")
    p.add_argument("--output", help="output root, overrides output.directory and the environment")
    p.add_argument("--workers", type=int, help="overrides solver.workers")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override any config key (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _overrides(args) -> dict:
    out = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        out[key.strip()] = value.strip()
    for flag, key in (("eps", "physics.eps"), ("nx", "grid.nx"), ("ny", "grid.ny"),
                      ("output", "output.directory"), ("workers", "solver.workers")):
        if getattr(args, flag) is not None:
            out[key] = getattr(args, flag)
    return out


def _report_slopes(result: SweepResult) -> None:
    for s in result.slopes.values():
        print(f"slope {s.quantity:16s} {s.slope:8.4f}  95% CI [{s.ci_low:.4f}, {s.ci_high:.4f}]")


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, _overrides(args))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    manifest = Manifest(cfg)
    try:
        if args.verb == "build-profiles":
            run_build_profiles(cfg, manifest)
        elif args.verb == "solve-remainder":
            run_solve_remainder(cfg, manifest=manifest)
        elif args.verb == "convergence-study":
            _report_slopes(run_convergence_study(cfg, manifest=manifest))
        elif args.verb == "audit":
            return _finish_audit(run_audits(cfg, manifest=manifest))
        else:
            run_build_profiles(cfg, manifest)
            records = run_solve_remainder(cfg, manifest=manifest)
            if any(r.status != "ok" for r in records):
                raise SolveFailure("at least one remainder solve failed")
            _report_slopes(run_convergence_study(cfg, records, manifest))
            return _finish_audit(run_audits(cfg, manifest=manifest))
        return EXIT_OK
    except (ConfigError, MissingArtifact, FormatError, AuditPrecondition) as exc:
        print(f"{getattr(exc, 'stage', args.verb)}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ArtifactError as exc:
        print(f"{getattr(exc, 'stage', args.verb)}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    finally:
        manifest.write(cfg.output)


def _finish_audit(bundle: AuditBundle) -> int:
    for name, v in sorted(bundle.verdicts.items()):
        print(f"audit {name:12s} spread {v['spread']:.3g}  {'pass' if v['passed'] else 'FAIL'}")
    return EXIT_OK if bundle.passed else EXIT_AUDIT


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
