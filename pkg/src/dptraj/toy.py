"""Small synthetic corpus with known structure, for end-to-end checks.

A 10x10 grid of 500 m cells and three fixed routes that all pass through a
shared three-cell trunk in row 5. Two hours with different route mixes.
"""
from __future__ import annotations

import math

import numpy as np

from .grid import METERS_PER_DEGREE, GridSpec
from .preprocess import Dataset, Trajectory

TOY_CELL = 500.0
TOY_HOURS = (8, 17)

# (row, col) waypoints; consecutive cells are 8-neighbors
TOY_ROUTES = (
    tuple((5, c) for c in range(10)),
    ((9, 1), (8, 2), (7, 3), (6, 3), (5, 4), (5, 5), (5, 6), (4, 7), (3, 8), (2, 9)),
    ((0, 1), (1, 2), (2, 3), (3, 3), (4, 3), (5, 4), (5, 5), (5, 6), (6, 7), (7, 8), (8, 9)),
)
TOY_MIX = {8: (0.5, 0.3, 0.2), 17: (0.2, 0.3, 0.5)}


def toy_grid(n: int = 10, cell: float = TOY_CELL, lat0: float = 37.7) -> GridSpec:
    """Grid with exactly ``n`` x ``n`` cells."""
    # 0.999 keeps float rounding from adding an extra row/column
    dlat = 0.999 * n * cell / METERS_PER_DEGREE
    mid = lat0 + dlat / 2
    dlon = 0.999 * n * cell / (METERS_PER_DEGREE * math.cos(math.radians(mid)))
    return GridSpec(lat0, lat0 + dlat, -122.45, -122.45 + dlon, cell)


def route_cells(route, grid: GridSpec) -> tuple[int, ...]:
    return tuple(grid.cell(r, c) for r, c in route)


def toy_dataset(n: int = 5000, seed: int = 0, grid: GridSpec | None = None) -> Dataset:
    """``n`` trajectories: hour uniform over the two hours, route drawn from that hour's mix."""
    grid = grid or toy_grid()
    routes = [route_cells(r, grid) for r in TOY_ROUTES]
    rng = np.random.default_rng(seed)
    hours = rng.choice(TOY_HOURS, size=n)
    trajs = []
    for h in hours:
        k = rng.choice(len(routes), p=TOY_MIX[int(h)])
        trajs.append(Trajectory(routes[k], int(h)))
    return Dataset(trajs, grid)


def grid_config_lines(grid: GridSpec) -> str:
    """``bbox`` and ``cell_size`` config lines reproducing ``grid`` exactly."""
    box = ",".join(repr(float(v)) for v in (grid.lat_min, grid.lat_max, grid.lon_min, grid.lon_max))
    return f"bbox = {box}\ncell_size = {grid.cell_size!r}\n"
