"""Evaluation of Eulerian fields at ``Y = sqrt(eps) y`` on a boundary-layer grid."""
from __future__ import annotations

import numpy as np

from .errors import IncompatibleGrids
from .grid_core import TensorGrid, sample_columns

_GT, _GW = np.polynomial.legendre.leggauss(8)


def composite_gauss(panels: int):
    """Nodes and weights of an ``8 * panels``-point composite Gauss rule on ``[0, 1]``."""
    edges = np.linspace(0.0, 1.0, panels + 1)
    h = np.diff(edges)[:, None]
    t = edges[:-1, None] + 0.5 * h * (_GT[None, :] + 1.0)
    return t.ravel(), (0.5 * h * _GW[None, :]).ravel()


class OuterSampler:
    """Maps Eulerian columns onto the boundary-layer nodes of the same x-grid."""

    def __init__(self, euler_grid: TensorGrid, layer_grid: TensorGrid):
        if euler_grid.nx != layer_grid.nx or not np.allclose(euler_grid.x, layer_grid.x, atol=1e-14):
            raise IncompatibleGrids("Eulerian and boundary-layer grids must share their x-nodes")
        self.src = euler_grid.y
        self.Y = np.sqrt(layer_grid.eps) * layer_grid.y
        if self.Y[-1] > self.src[-1] * (1 + 1e-12):
            raise IncompatibleGrids(f"sqrt(eps) y_max = {self.Y[-1]:.4g} exceeds the Eulerian Y range")
        self.grid = layer_grid
        self._cache = {}
        # panels no wider than two Eulerian cells at the largest target
        panels = max(1, int(np.ceil(self.Y[-1] / (2.0 * np.min(np.diff(self.src))))))
        self._t, self._w = composite_gauss(panels)

    def __call__(self, values: np.ndarray, key=None) -> np.ndarray:
        if key is not None and key in self._cache:
            return self._cache[key]
        out = sample_columns(values, self.src, self.Y)
        if key is not None:
            self._cache[key] = out
        return out

    def mean_slope(self, f_Y: np.ndarray) -> np.ndarray:
        """``int_0^1 f_Y(x, tY) dt``, so that ``f(Y) - f(0) = Y * result``."""
        s = sample_columns(f_Y, self.src, np.outer(self.Y, self._t))
        return s @ self._w

    def taylor_remainder(self, f_YY: np.ndarray) -> np.ndarray:
        """``int_0^1 (1-t) f_YY(x, tY) dt``, so that ``f - f(0) - Y f_Y(0) = Y^2 * result``."""
        s = sample_columns(f_YY, self.src, np.outer(self.Y, self._t))
        return s @ (self._w * (1.0 - self._t))
