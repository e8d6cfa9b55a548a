"""Uniform geographic grid: the discrete location universe.

Cells are indexed row-major with row 0 at the northern edge of the bounding
box and column 0 at its western edge. All distance math uses an
equirectangular projection fixed at the box's mid-latitude.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

EARTH_RADIUS_M = 6_371_008.8
METERS_PER_DEGREE = math.pi * EARTH_RADIUS_M / 180.0

N_HOURS = 24


class OutOfBounds(ValueError):
    """A coordinate falls outside the grid's bounding box."""


class NotNeighbor(ValueError):
    """Two cells are farther apart than the neighborhood radius."""


@dataclass(frozen=True)
class GridSpec:
    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float
    cell_size: float
    n_rows: int = field(init=False)
    n_cols: int = field(init=False)

    def __post_init__(self):
        if not (self.lat_min < self.lat_max and self.lon_min < self.lon_max):
            raise ValueError("bounding box must satisfy lat_min < lat_max and lon_min < lon_max")
        if not self.cell_size > 0:
            raise ValueError("cell_size must be positive")
        height, width = self.extent_m
        object.__setattr__(self, "n_rows", max(1, math.ceil(height / self.cell_size)))
        object.__setattr__(self, "n_cols", max(1, math.ceil(width / self.cell_size)))

    @property
    def m_per_deg_lat(self) -> float:
        return METERS_PER_DEGREE

    @property
    def m_per_deg_lon(self) -> float:
        mid = 0.5 * (self.lat_min + self.lat_max)
        return METERS_PER_DEGREE * math.cos(math.radians(mid))

    @property
    def extent_m(self) -> tuple[float, float]:
        """(north-south, east-west) size of the box in meters."""
        return ((self.lat_max - self.lat_min) * self.m_per_deg_lat,
                (self.lon_max - self.lon_min) * self.m_per_deg_lon)

    @property
    def universe_size(self) -> int:
        return self.n_rows * self.n_cols

    def contains(self, lat: float, lon: float) -> bool:
        return self.lat_min <= lat <= self.lat_max and self.lon_min <= lon <= self.lon_max

    def cell(self, row: int, col: int) -> int:
        if not (0 <= row < self.n_rows and 0 <= col < self.n_cols):
            raise IndexError(f"cell ({row}, {col}) outside {self.n_rows}x{self.n_cols} grid")
        return row * self.n_cols + col

    def rowcol(self, cell: int) -> tuple[int, int]:
        if not 0 <= cell < self.universe_size:
            raise IndexError(f"cell {cell} outside universe of size {self.universe_size}")
        return divmod(int(cell), self.n_cols)

    def center(self, cell: int) -> tuple[float, float]:
        """Latitude/longitude of a cell's center."""
        row, col = self.rowcol(cell)
        lat = self.lat_max - (row + 0.5) * self.cell_size / self.m_per_deg_lat
        lon = self.lon_min + (col + 0.5) * self.cell_size / self.m_per_deg_lon
        return lat, lon

    def distance_m(self, lat1: float, lon1: float, lat2: float, lon2: float) -> float:
        dy = (lat2 - lat1) * self.m_per_deg_lat
        dx = (lon2 - lon1) * self.m_per_deg_lon
        return math.hypot(dx, dy)

    def header_fields(self) -> dict:
        return {"rows": self.n_rows, "cols": self.n_cols, "cell": format(self.cell_size, "g")}


def snap(lat: float, lon: float, grid: GridSpec) -> int:
    """Return the cell covering a GPS point.

    Rows cover half-open latitude bands (lat_max - (r+1)h, lat_max - r*h];
    columns cover [lon_min + c*w, lon_min + (c+1)*w). Points on the southern
    or eastern box edge fall into the last row/column.
    """
    if not grid.contains(lat, lon):
        raise OutOfBounds(f"({lat}, {lon}) outside bounding box")
    dy = (grid.lat_max - lat) * grid.m_per_deg_lat
    dx = (lon - grid.lon_min) * grid.m_per_deg_lon
    row = min(int(math.floor(dy / grid.cell_size)), grid.n_rows - 1)
    col = min(int(math.floor(dx / grid.cell_size)), grid.n_cols - 1)
    return row * grid.n_cols + col


def cell_distance_m(a: int, b: int, grid: GridSpec) -> float:
    ra, ca = grid.rowcol(a)
    rb, cb = grid.rowcol(b)
    return grid.cell_size * math.hypot(ra - rb, ca - cb)


def chebyshev(a: int, b: int, grid: GridSpec) -> int:
    ra, ca = grid.rowcol(a)
    rb, cb = grid.rowcol(b)
    return max(abs(ra - rb), abs(ca - cb))


@dataclass(frozen=True)
class NeighborhoodSpec:
    s: int = 5

    def __post_init__(self):
        if self.s < 0:
            raise ValueError("neighborhood radius must be non-negative")

    @property
    def width(self) -> int:
        return 2 * self.s + 1

    @property
    def class_count(self) -> int:
        return self.width ** 2

    @property
    def center_class(self) -> int:
        return self.s * self.width + self.s


def relative_offset(src: int, dst: int, grid: GridSpec, nb: NeighborhoodSpec) -> int:
    """Class index of ``dst`` within the (2s+1)x(2s+1) block centered on ``src``."""
    rs, cs = grid.rowcol(src)
    rd, cd = grid.rowcol(dst)
    dr, dc = rd - rs, cd - cs
    if max(abs(dr), abs(dc)) > nb.s:
        raise NotNeighbor(f"cells {src} and {dst} are {max(abs(dr), abs(dc))} > {nb.s} apart")
    return (dr + nb.s) * nb.width + (dc + nb.s)


def offset_to_cell(src: int, cls: int, grid: GridSpec, nb: NeighborhoodSpec) -> tuple[int, bool]:
    """Inverse of :func:`relative_offset`.

    Returns ``(cell, valid)``; ``cell`` is -1 when the target lies off the grid.
    """
    if not 0 <= cls < nb.class_count:
        raise IndexError(f"class {cls} outside [0, {nb.class_count})")
    dr, dc = divmod(cls, nb.width)
    row, col = grid.rowcol(src)
    row += dr - nb.s
    col += dc - nb.s
    if 0 <= row < grid.n_rows and 0 <= col < grid.n_cols:
        return row * grid.n_cols + col, True
    return -1, False


def neighbor_table(grid: GridSpec, nb: NeighborhoodSpec) -> np.ndarray:
    """Full-grid cell id of every (cell, class) target, -1 where off-grid.

    Shape ``(universe_size, class_count)``.
    """
    rows, cols = np.divmod(np.arange(grid.universe_size), grid.n_cols)
    dr, dc = np.divmod(np.arange(nb.class_count), nb.width)
    tr = rows[:, None] + dr[None, :] - nb.s
    tc = cols[:, None] + dc[None, :] - nb.s
    ok = (tr >= 0) & (tr < grid.n_rows) & (tc >= 0) & (tc < grid.n_cols)
    return np.where(ok, tr * grid.n_cols + tc, -1)


class OccupiedCellIndex:
    """Dense re-indexing of the grid cells a model knows about."""

    def __init__(self, cells, grid: GridSpec):
        cells = sorted(set(int(c) for c in cells))
        if not cells:
            raise ValueError("occupied-cell index cannot be empty")
        if cells[0] < 0 or cells[-1] >= grid.universe_size:
            raise IndexError("occupied cell outside the grid")
        self.grid = grid
        self.cells = np.asarray(cells, dtype=np.int64)
        self._dense = np.full(grid.universe_size, -1, dtype=np.int64)
        self._dense[self.cells] = np.arange(len(cells))

    @classmethod
    def full(cls, grid: GridSpec) -> "OccupiedCellIndex":
        return cls(range(grid.universe_size), grid)

    @classmethod
    def from_trajectories(cls, trajectories, grid: GridSpec) -> "OccupiedCellIndex":
        return cls({c for t in trajectories for c in t.cells}, grid)

    def __len__(self) -> int:
        return len(self.cells)

    def __contains__(self, cell) -> bool:
        return 0 <= cell < self.grid.universe_size and self._dense[cell] >= 0

    def dense(self, cells):
        """Map full-grid cell ids to dense indices; raises KeyError if unindexed."""
        arr = np.asarray(cells, dtype=np.int64)
        if arr.size and (arr.min() < 0 or arr.max() >= self.grid.universe_size):
            raise KeyError("cell outside the grid")
        out = self._dense[arr]
        if np.any(out < 0):
            bad = np.atleast_1d(arr)[np.atleast_1d(out) < 0][0]
            raise KeyError(f"cell {int(bad)} is not in the occupied-cell index")
        return out if out.ndim else int(out)

    def dense_or_missing(self, cells) -> np.ndarray:
        """Like :meth:`dense` but returns -1 for unindexed or off-grid cells."""
        arr = np.asarray(cells, dtype=np.int64)
        ok = (arr >= 0) & (arr < self.grid.universe_size)
        out = np.full(arr.shape, -1, dtype=np.int64)
        out[ok] = self._dense[arr[ok]]
        return out

    def cell(self, dense_index):
        return self.cells[dense_index]


def grid_to_dict(grid: GridSpec) -> dict:
    return {"lat_min": grid.lat_min, "lat_max": grid.lat_max, "lon_min": grid.lon_min,
            "lon_max": grid.lon_max, "cell_size": grid.cell_size}


def grid_from_dict(d: dict) -> GridSpec:
    return GridSpec(float(d["lat_min"]), float(d["lat_max"]), float(d["lon_min"]),
                    float(d["lon_max"]), float(d["cell_size"]))
