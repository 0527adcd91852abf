from functools import lru_cache

from artifact.euler0_builder import build_euler_flow
from artifact.grid_core import build_grid


@lru_cache(maxsize=None)
def canonical_flow(nx: int = 81, delta: float = 0.05, nY: int = 481):
    return build_euler_flow(0.25, nx, delta, nY=nY)


@lru_cache(maxsize=None)
def canonical_layers(eps: float, nx: int = 81, ny: int = 161, delta: float = 0.05, nY: int = 481):
    """Euler-0 flow, layer grid, Prandtl-0 and Euler-1 layers for the bump-data flow."""
    from artifact.profile_assembly import first_euler_layer, leading_layer
    flow = canonical_flow(nx, delta, nY)
    grid = build_grid(0.25, 30.0, nx, ny, 2.0, eps)
    p0 = leading_layer(flow, grid)
    return flow, grid, p0, first_euler_layer(flow, p0)
