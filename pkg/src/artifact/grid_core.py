"""Tensor grids, finite differences, weighted quadrature and field persistence.

Every solver in the package samples its unknowns on a :class:`TensorGrid`
covering ``(0, L) x (0, y_max)`` in the boundary-layer variable ``y``.  The
Eulerian normal coordinate is ``Y = sqrt(eps) * y``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.integrate import cumulative_trapezoid
from scipy.interpolate import PchipInterpolator

from .errors import FormatError, IncompatibleGrids

MAGIC = b"BLAYERFIELD\x00"
VERSION = 1
_HEADER = struct.Struct("<12sI")
_META = struct.Struct("<ddqqdd")


@dataclass(frozen=True)
class TensorGrid:
    """Uniform-in-x, power-law-stretched-in-y grid.

    Attributes:
        L: domain length.
        y_max: truncation height in the boundary-layer variable.
        nx, ny: node counts.
        stretch: exponent of the map ``y_j = y_max (j/(ny-1))**stretch``.
        eps: viscosity parameter.
    """

    L: float
    y_max: float
    nx: int
    ny: int
    stretch: float = 1.0
    eps: float = 1.0
    x: np.ndarray = field(init=False, repr=False, compare=False)
    y: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "x", np.linspace(0.0, self.L, self.nx))
        s = np.linspace(0.0, 1.0, self.ny)
        object.__setattr__(self, "y", self.y_max * s ** self.stretch)

    @property
    def Y(self) -> np.ndarray:
        return np.sqrt(self.eps) * self.y

    @property
    def dx(self) -> float:
        return self.L / (self.nx - 1)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nx, self.ny)

    def mesh(self):
        """Return ``(X, Y)`` arrays of shape ``(nx, ny)`` in (x, y)."""
        return np.meshgrid(self.x, self.y, indexing="ij")

    def with_eps(self, eps: float) -> "TensorGrid":
        return build_grid(self.L, self.y_max, self.nx, self.ny, self.stretch, eps)

    def refined(self, factor: float = 2.0) -> "TensorGrid":
        nx = int(round((self.nx - 1) * factor)) + 1
        ny = int(round((self.ny - 1) * factor)) + 1
        return build_grid(self.L, self.y_max, nx, ny, self.stretch, self.eps)

    def same_nodes(self, other: "TensorGrid") -> bool:
        return (self.nx == other.nx and self.ny == other.ny
                and np.allclose(self.x, other.x) and np.allclose(self.y, other.y))


def build_grid(L, y_max, nx, ny, stretch=1.0, eps=1.0) -> TensorGrid:
    """Validate parameters and construct a :class:`TensorGrid`."""
    vals = dict(L=L, y_max=y_max, stretch=stretch, eps=eps)
    for name, v in vals.items():
        if not np.isfinite(v):
            raise ValueError(f"{name} must be finite, got {v}")
    if L <= 0 or y_max <= 0:
        raise ValueError("L and y_max must be positive")
    if int(nx) != nx or int(ny) != ny or nx < 9 or ny < 9:
        raise ValueError("nx and ny must be integers >= 9")
    if stretch < 1:
        raise ValueError("stretch must be >= 1")
    if not 0 < eps <= 1:
        raise ValueError("eps must lie in (0, 1]")
    return TensorGrid(float(L), float(y_max), int(nx), int(ny), float(stretch), float(eps))


class ScalarField:
    """Samples of one scalar quantity on the nodes of a grid."""

    __slots__ = ("grid", "values")

    def __init__(self, grid: TensorGrid, values):
        values = np.asarray(values, dtype=float)
        if values.shape != grid.shape:
            raise IncompatibleGrids(f"field shape {values.shape} != grid shape {grid.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("field contains non-finite samples")
        self.grid = grid
        self.values = values

    def like(self, values) -> "ScalarField":
        return ScalarField(self.grid, values)

    def __repr__(self):
        return f"ScalarField(nx={self.grid.nx}, ny={self.grid.ny}, max={np.abs(self.values).max():.3g})"


@dataclass(frozen=True)
class QuadratureWeightSpec:
    """Weight ``y**y_power * <y>**bracket_power`` optionally restricted to x=0 or x=L."""

    y_power: int = 0
    bracket_power: int = 0
    boundary_slice: str | None = None

    def __post_init__(self):
        if self.y_power < 0 or self.bracket_power < 0:
            raise ValueError("weight powers must be non-negative")
        if self.boundary_slice not in (None, "x=0", "x=L"):
            raise ValueError("boundary_slice must be None, 'x=0' or 'x=L'")

    def weight(self, y):
        return y ** self.y_power * (1.0 + y * y) ** (0.5 * self.bracket_power)


# ---------------------------------------------------------------------------
# finite differences

def fd_weights(z: float, xs, m: int) -> np.ndarray:
    """Fornberg weights for the ``m``-th derivative at ``z`` from nodes ``xs``."""
    xs = np.asarray(xs, dtype=float)
    n = len(xs)
    c = np.zeros((n, m + 1))
    c1, c4 = 1.0, xs[0] - z
    c[0, 0] = 1.0
    for i in range(1, n):
        mn = min(i, m)
        c2, c5, c4 = 1.0, c4, xs[i] - z
        for j in range(i):
            c3 = xs[i] - xs[j]
            c2 *= c3
            if j == i - 1:
                for k in range(mn, 0, -1):
                    c[i, k] = c1 * (k * c[i - 1, k - 1] - c5 * c[i - 1, k]) / c2
                c[i, 0] = -c1 * c5 * c[i - 1, 0] / c2
            for k in range(mn, 0, -1):
                c[j, k] = (c4 * c[j, k] - k * c[j, k - 1]) / c3
            c[j, 0] = c4 * c[j, 0] / c3
        c1 = c2
    return c[:, m]


@lru_cache(maxsize=256)
def _diff_matrix_cached(key: bytes, n: int, order: int) -> sp.csr_matrix:
    coords = np.frombuffer(key, dtype=float)
    rows, cols, vals = [], [], []
    bw = order + 2  # one-sided stencil width keeps second order
    for i in range(n):
        if i == 0:
            idx = np.arange(0, bw)
        elif i == n - 1:
            idx = np.arange(n - bw, n)
        else:
            idx = np.array([i - 1, i, i + 1])
        w = fd_weights(coords[i], coords[idx], order)
        rows.extend([i] * len(idx))
        cols.extend(idx.tolist())
        vals.extend(w.tolist())
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def diff_matrix(coords, order: int) -> sp.csr_matrix:
    """Sparse 1-D derivative matrix of the given order (1 or 2) on ``coords``."""
    coords = np.ascontiguousarray(coords, dtype=float)
    if len(coords) < order + 2:
        raise ValueError("too few nodes for the requested derivative")
    return _diff_matrix_cached(coords.tobytes(), len(coords), order)


def d_axis(values: np.ndarray, coords, axis: int, order: int = 1) -> np.ndarray:
    """Differentiate a 2-D array along ``axis`` (0 = x, 1 = y)."""
    if axis not in (0, 1):
        raise ValueError("axis must be 0 (x) or 1 (y)")
    D = diff_matrix(coords, order)
    if axis == 0:
        return np.asarray(D @ values)
    return np.asarray((D @ values.T).T)


def differentiate(f: ScalarField, axis: str, order: int = 1) -> ScalarField:
    """Second-order finite-difference derivative of ``f`` along ``'x'`` or ``'y'``."""
    if axis not in ("x", "y") or order not in (1, 2):
        raise ValueError("axis must be 'x' or 'y' and order 1 or 2")
    coords = f.grid.x if axis == "x" else f.grid.y
    if len(coords) < 3:
        raise ValueError("need at least three nodes along the axis")
    return f.like(d_axis(f.values, coords, 0 if axis == "x" else 1, order))


# ---------------------------------------------------------------------------
# quadrature

def trapz_weights(coords) -> np.ndarray:
    """Trapezoidal quadrature weights on (possibly nonuniform) nodes."""
    h = np.diff(coords)
    w = np.zeros(len(coords))
    w[:-1] += 0.5 * h
    w[1:] += 0.5 * h
    return w


def integrate(values: np.ndarray, grid: TensorGrid, mask=None) -> float:
    """Trapezoidal double integral of a nodal array over the grid."""
    vals = values if mask is None else np.where(mask, values, 0.0)
    return float(trapz_weights(grid.x) @ vals @ trapz_weights(grid.y))


def integrate_boundary(values: np.ndarray, grid: TensorGrid, side: str = "x=L") -> float:
    col = values[-1] if side == "x=L" else values[0]
    return float(trapz_weights(grid.y) @ col)


def weighted_norm(f: ScalarField, w: QuadratureWeightSpec = QuadratureWeightSpec(), p="2") -> float:
    """Weighted L2 (trapezoidal) or sup norm of a field on the domain or a boundary slice."""
    g = f.grid
    wy = w.weight(g.y)
    if w.boundary_slice is not None:
        col = f.values[-1] if w.boundary_slice == "x=L" else f.values[0]
        if str(p) == "inf":
            return float(np.max(np.abs(col) * wy))
        return float(np.sqrt(trapz_weights(g.y) @ (col ** 2 * wy)))
    if str(p) == "inf":
        return float(np.max(np.abs(f.values) * wy[None, :]))
    return float(np.sqrt(integrate(f.values ** 2 * wy[None, :], g)))


def cumulative_from_top(values: np.ndarray, y) -> np.ndarray:
    """``int_y^{y_max} values dy'`` along the last axis by the trapezoidal rule."""
    full = cumulative_trapezoid(values, y, axis=-1, initial=0.0)
    return full[..., -1:] - full


def cumulative_from_wall(values: np.ndarray, y) -> np.ndarray:
    """``int_0^y values dy'`` along the last axis by the trapezoidal rule."""
    return cumulative_trapezoid(values, y, axis=-1, initial=0.0)


# ---------------------------------------------------------------------------
# Eulerian <-> boundary-layer coordinates

def sample_columns(values: np.ndarray, Y_src, Y_target) -> np.ndarray:
    """Monotone-cubic interpolation of each x-column from ``Y_src`` to ``Y_target``.

    ``values`` has shape ``(nx, len(Y_src))``; ``Y_target`` may have any shape
    and the result has shape ``(nx,) + Y_target.shape``.
    """
    Y_target = np.asarray(Y_target, dtype=float)
    if Y_target.max() > Y_src[-1] * (1 + 1e-12):
        raise ValueError("target Y exceeds the Eulerian domain")
    interp = PchipInterpolator(Y_src, values, axis=1, extrapolate=False)
    out = interp(Y_target.ravel())
    return out.reshape((values.shape[0],) + Y_target.shape)


# ---------------------------------------------------------------------------
# persistence

def save_field(path, f: ScalarField) -> None:
    """Write a field in the little-endian binary container."""
    g = f.grid
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION))
        fh.write(_META.pack(g.L, g.y_max, g.nx, g.ny, g.stretch, g.eps))
        fh.write(np.ascontiguousarray(f.values, dtype="<f8").tobytes())


def load_field(path) -> ScalarField:
    path = Path(path)
    data = path.read_bytes()
    nhead = _HEADER.size + _META.size
    if len(data) < nhead:
        raise FormatError(f"{path}: truncated header")
    magic, version = _HEADER.unpack_from(data, 0)
    if magic != MAGIC or version != VERSION:
        raise FormatError(f"{path}: bad magic or version")
    L, y_max, nx, ny, stretch, eps = _META.unpack_from(data, _HEADER.size)
    if len(data) != nhead + 8 * nx * ny:
        raise FormatError(f"{path}: expected {nx * ny} samples")
    vals = np.frombuffer(data, dtype="<f8", offset=nhead).reshape(nx, ny)
    grid = TensorGrid(L, y_max, int(nx), int(ny), stretch, eps)
    return ScalarField(grid, vals.astype(float))


def export_csv(path, f: ScalarField) -> None:
    X, Yg = f.grid.mesh()
    table = np.column_stack([X.ravel(), Yg.ravel(), f.values.ravel()])
    np.savetxt(path, table, delimiter=",", header="x,y,value", comments="", fmt="%.17g")
