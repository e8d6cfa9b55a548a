"""Raw GPS logs -> grid-snapped, hour-stamped trajectories -> transition samples.

The pipeline order is

    split_trips -> filter_speed_bbox -> snap -> aggregate_60s -> interpolate_gaps
    -> contract_self_loops -> drop length-1 -> drop_calendar -> assign_hour

Visits are ``(cell, unix_seconds)`` tuples until :func:`assign_hour` discards
the timestamps.
"""
from __future__ import annotations

import datetime as dt
import logging
import math
import os
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence
from zoneinfo import ZoneInfo

import numpy as np

from .errors import ConfigError, DataError
from .grid import GridSpec, N_HOURS, NeighborhoodSpec, relative_offset, snap

log = logging.getLogger(__name__)

DEFAULT_TZ = "America/Los_Angeles"
HEADER_TAG = "#PTRAJ-DS v1"


class RawPoint(NamedTuple):
    taxi_id: str
    lat: float
    lon: float
    occupied: bool
    timestamp: int


@dataclass(frozen=True)
class Trajectory:
    cells: tuple[int, ...]
    hour: int

    def __post_init__(self):
        if len(self.cells) < 2:
            raise ValueError("a trajectory needs at least two cells")
        if not 0 <= self.hour < N_HOURS:
            raise ValueError(f"hour {self.hour} outside [0, 24)")
        if any(a == b for a, b in zip(self.cells, self.cells[1:])):
            raise ValueError("consecutive duplicate cells")

    @property
    def src(self) -> int:
        return self.cells[0]

    @property
    def dst(self) -> int:
        return self.cells[-1]

    def __len__(self) -> int:
        return len(self.cells)


@dataclass(frozen=True)
class TransitionSample:
    current: int
    destination: int
    hour: int
    label: int


@dataclass
class Dataset:
    trajectories: list[Trajectory]
    grid: GridSpec

    def __len__(self) -> int:
        return len(self.trajectories)

    def hours(self) -> set[int]:
        return {t.hour for t in self.trajectories}

    def in_hour(self, hour: int) -> list[Trajectory]:
        return [t for t in self.trajectories if t.hour == hour]


@dataclass(frozen=True)
class PreprocessSettings:
    v_max_kmh: float = 150.0
    window_s: int = 60
    gap_split_s: int = 300
    timezone: str = DEFAULT_TZ
    holidays: frozenset = frozenset()


# -- raw input ---------------------------------------------------------------

def read_cabspotting(path, taxi_id: str | None = None, errors: Counter | None = None) -> list[RawPoint]:
    """Read one cabspotting file (``lat lon occupied unix_time`` per line).

    Rows may be newest- or oldest-first; the result is sorted by time with
    duplicate timestamps removed. Malformed rows are skipped and counted.
    """
    path = Path(path)
    if taxi_id is None:
        taxi_id = path.stem.removeprefix("new_")
    points = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            try:
                lat, lon, occ, ts = float(parts[0]), float(parts[1]), int(parts[2]), int(parts[3])
                if occ not in (0, 1) or not (math.isfinite(lat) and math.isfinite(lon)):
                    raise ValueError
            except (ValueError, IndexError):
                if errors is not None:
                    errors["malformed_row"] += 1
                continue
            points.append(RawPoint(taxi_id, lat, lon, bool(occ), ts))
    points.sort(key=lambda p: p.timestamp)
    out = []
    for p in points:
        if out and out[-1].timestamp == p.timestamp:
            if errors is not None:
                errors["duplicate_timestamp"] += 1
            continue
        out.append(p)
    return out


def split_trips(points: Iterable[RawPoint]) -> list[list[RawPoint]]:
    """One trip per maximal run of consecutive occupied points (per taxi)."""
    trips, current, taxi = [], [], None
    for p in points:
        if p.taxi_id != taxi:
            if current:
                trips.append(current)
            current, taxi = [], p.taxi_id
        if p.occupied:
            current.append(p)
        elif current:
            trips.append(current)
            current = []
    if current:
        trips.append(current)
    return trips


def filter_speed_bbox(trip: Sequence[RawPoint], grid: GridSpec,
                      v_max_kmh: float = 150.0) -> tuple[Sequence[RawPoint] | None, str | None]:
    """Return ``(trip, None)`` if kept, else ``(None, reason)``."""
    if any(not grid.contains(p.lat, p.lon) for p in trip):
        return None, "out_of_box"
    v_max = v_max_kmh / 3.6
    for a, b in zip(trip, trip[1:]):
        d = grid.distance_m(a.lat, a.lon, b.lat, b.lon)
        elapsed = b.timestamp - a.timestamp
        if elapsed <= 0:
            if d > 0:
                return None, "speed"
            continue
        if d / elapsed > v_max:
            return None, "speed"
    return trip, None


def snap_trip(trip: Sequence[RawPoint], grid: GridSpec) -> list[tuple[int, int]]:
    return [(snap(p.lat, p.lon, grid), p.timestamp) for p in trip]


# -- temporal regularization -------------------------------------------------

def aggregate_60s(visits: Sequence[tuple[int, int]], window: int = 60) -> list[tuple[int, int]]:
    """Keep the most frequent cell of every time window.

    Windows are anchored at the first timestamp; ties go to the cell seen
    first in the window. Each output visit is stamped with its window start.
    """
    if not visits:
        return []
    t0 = visits[0][1]
    out = []
    bucket, counts, first_seen = None, Counter(), {}
    for cell, t in visits:
        w = (t - t0) // window
        if w != bucket:
            if bucket is not None:
                out.append((_majority(counts, first_seen), t0 + bucket * window))
            bucket, counts, first_seen = w, Counter(), {}
        counts[cell] += 1
        first_seen.setdefault(cell, len(first_seen))
    out.append((_majority(counts, first_seen), t0 + bucket * window))
    return out


def _majority(counts: Counter, first_seen: dict) -> int:
    return min(counts, key=lambda c: (-counts[c], first_seen[c]))


def interpolate_gaps(visits: Sequence[tuple[int, int]], grid: GridSpec, window: int = 60,
                     split_at: int = 300) -> list[list[tuple[int, int]]]:
    """Fill short gaps by linear interpolation in (row, col) space.

    A gap g with window < g < split_at gets one synthetic visit per missing
    window step. Gaps >= split_at cut the trip in two, so the result is a
    list of visit lists.
    """
    if not visits:
        return []
    parts = [[visits[0]]]
    for (c0, t0), (c1, t1) in zip(visits, visits[1:]):
        gap = t1 - t0
        if gap >= split_at:
            parts.append([(c1, t1)])
            continue
        if gap > window:
            r0, k0 = grid.rowcol(c0)
            r1, k1 = grid.rowcol(c1)
            steps = int(round(gap / window))
            for k in range(1, steps):
                f = k / steps
                r = int(math.floor(r0 + f * (r1 - r0) + 0.5))
                c = int(math.floor(k0 + f * (k1 - k0) + 0.5))
                parts[-1].append((r * grid.n_cols + c, t0 + k * window))
        parts[-1].append((c1, t1))
    return parts


def contract_self_loops(visits: Sequence[tuple[int, int]]) -> list[tuple[int, int]]:
    out = []
    for cell, t in visits:
        if out and out[-1][0] == cell:
            continue
        out.append((cell, t))
    return out


# -- calendar ----------------------------------------------------------------

def load_holidays(path) -> frozenset:
    """Read a blacklist file with one ISO date (YYYY-MM-DD) per line; ``#`` comments."""
    dates = set()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read holiday file {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            dates.add(dt.date.fromisoformat(line))
        except ValueError:
            raise ConfigError(f"{path}:{lineno}: not an ISO date: {line!r}") from None
    return frozenset(dates)


def default_holidays() -> frozenset:
    return load_holidays(Path(__file__).with_name("us_holidays.txt"))


def is_workday(timestamp: int, holidays=frozenset(), tz: str = DEFAULT_TZ) -> bool:
    day = dt.datetime.fromtimestamp(timestamp, ZoneInfo(tz))
    return day.weekday() < 5 and day.date() not in holidays


def drop_calendar(trips: Iterable[Sequence[tuple[int, int]]], holidays=frozenset(),
                  tz: str = DEFAULT_TZ) -> list:
    """Remove trips whose first visit falls on a weekend or blacklisted date."""
    return [v for v in trips if is_workday(v[0][1], holidays, tz)]


def assign_hour(visits: Sequence[tuple[int, int]], tz: str = DEFAULT_TZ) -> Trajectory:
    """Stamp the trip with the hour holding most of its visits.

    Ties go to the hour reached first in the trip.
    """
    if not visits:
        raise ValueError("empty visit list")
    zone = ZoneInfo(tz)
    hours = [dt.datetime.fromtimestamp(t, zone).hour for _, t in visits]
    counts = Counter(hours)
    first = {}
    for i, h in enumerate(hours):
        first.setdefault(h, i)
    hour = min(counts, key=lambda h: (-counts[h], first[h]))
    return Trajectory(tuple(c for c, _ in visits), hour)


# -- full pipeline -----------------------------------------------------------

def process_points(points: Sequence[RawPoint], grid: GridSpec,
                   settings: PreprocessSettings = PreprocessSettings()):
    """Run the pipeline on one taxi's time-sorted points.

    Returns ``(items, reasons)`` where items are ``(sort_key, Trajectory)``.
    """
    reasons = Counter()
    items = []
    for trip in split_trips(points):
        reasons["trips"] += 1
        kept, why = filter_speed_bbox(trip, grid, settings.v_max_kmh)
        if kept is None:
            reasons[why] += 1
            continue
        visits = aggregate_60s(snap_trip(kept, grid), settings.window_s)
        for part in interpolate_gaps(visits, grid, settings.window_s, settings.gap_split_s):
            part = contract_self_loops(part)
            if len(part) < 2:
                reasons["single_visit"] += 1
                continue
            if not is_workday(part[0][1], settings.holidays, settings.timezone):
                reasons["calendar"] += 1
                continue
            items.append(((trip[0].taxi_id, part[0][1]), assign_hour(part, settings.timezone)))
    return items, reasons


def _process_file(args):
    path, grid, settings = args
    errors = Counter()
    points = read_cabspotting(path, errors=errors)
    items, reasons = process_points(points, grid, settings)
    return items, reasons + errors


def preprocess_files(paths: Sequence, grid: GridSpec, settings: PreprocessSettings = PreprocessSettings(),
                     workers: int = 1) -> tuple[Dataset, Counter]:
    """Process per-taxi files (optionally in parallel) into a :class:`Dataset`.

    Output order is (taxi_id, first timestamp) regardless of ``workers``.
    """
    paths = sorted(str(p) for p in paths)
    if not paths:
        raise DataError("no raw input files")
    jobs = [(p, grid, settings) for p in paths]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_process_file, jobs))
    else:
        results = [_process_file(j) for j in jobs]
    items, reasons = [], Counter()
    for its, rs in results:
        items.extend(its)
        reasons.update(rs)
    items.sort(key=lambda kv: kv[0])
    return Dataset([t for _, t in items], grid), reasons


# -- transition samples ------------------------------------------------------

def extract_transition_samples(traj: Trajectory, grid: GridSpec, nb: NeighborhoodSpec,
                               dropped: Counter | None = None) -> list[TransitionSample]:
    """Decompose a trajectory into ((current, destination, hour) -> next) records."""
    out = []
    for a, b in zip(traj.cells, traj.cells[1:]):
        ra, ca = grid.rowcol(a)
        rb, cb = grid.rowcol(b)
        if max(abs(ra - rb), abs(ca - cb)) > nb.s:
            if dropped is not None:
                dropped["not_neighbor"] += 1
            continue
        out.append(TransitionSample(a, traj.dst, traj.hour, relative_offset(a, b, grid, nb)))
    return out


@dataclass
class TransitionSet:
    """Column-oriented transition samples grouped by source trajectory.

    Samples of trajectory ``i`` occupy rows ``offsets[i]:offsets[i+1]``.
    Trajectories without any valid sample are left out.
    """
    current: np.ndarray
    destination: np.ndarray
    hour: np.ndarray
    label: np.ndarray
    offsets: np.ndarray

    @property
    def n_trajectories(self) -> int:
        return len(self.offsets) - 1

    def __len__(self) -> int:
        return len(self.label)

    @property
    def traj_id(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_trajectories), np.diff(self.offsets))


def transition_set(trajectories: Iterable[Trajectory], grid: GridSpec, nb: NeighborhoodSpec,
                   dropped: Counter | None = None) -> TransitionSet:
    cur, dst, hr, lab, offsets = [], [], [], [], [0]
    for t in trajectories:
        samples = extract_transition_samples(t, grid, nb, dropped)
        if not samples:
            if dropped is not None:
                dropped["no_samples"] += 1
            continue
        for s in samples:
            cur.append(s.current)
            dst.append(s.destination)
            hr.append(s.hour)
            lab.append(s.label)
        offsets.append(len(lab))
    as_int = lambda x: np.asarray(x, dtype=np.int64)
    return TransitionSet(as_int(cur), as_int(dst), as_int(hr), as_int(lab), as_int(offsets))


# -- files -------------------------------------------------------------------

def write_dataset(path, dataset: Dataset, synthetic: bool = False) -> None:
    """Write the ``#PTRAJ-DS v1`` text format atomically."""
    g = dataset.grid.header_fields()
    header = f"{HEADER_TAG} rows={g['rows']} cols={g['cols']} cell={g['cell']}"
    if synthetic:
        header += " synthetic=1"
    lines = [header]
    lines += [f"{t.hour}\t{','.join(map(str, t.cells))}" for t in dataset.trajectories]
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_header(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline().rstrip("\n")
    return _parse_header(first, path)


def _parse_header(line: str, path) -> dict:
    if not line.startswith(HEADER_TAG):
        raise DataError(f"{path}: missing '{HEADER_TAG}' header")
    fields = {}
    for tok in line[len(HEADER_TAG):].split():
        key, sep, value = tok.partition("=")
        if not sep:
            raise DataError(f"{path}: bad header token {tok!r}")
        fields[key] = value
    return fields


def read_dataset(path, grid: GridSpec) -> Dataset:
    """Read a dataset file, checking its header against ``grid``."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DataError(f"{path}: empty file")
    fields = _parse_header(lines[0], path)
    check_grid_header(fields, grid, path)
    trajs = []
    for lineno, line in enumerate(lines[1:], 2):
        if not line.strip():
            continue
        try:
            hour, cells = line.split("\t")
            t = Trajectory(tuple(int(c) for c in cells.split(",")), int(hour))
            for c in t.cells:
                grid.rowcol(c)
        except (ValueError, IndexError) as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
        trajs.append(t)
    return Dataset(trajs, grid)


def check_grid_header(fields: dict, grid: GridSpec, path="<dataset>") -> None:
    expected = {k: str(v) for k, v in grid.header_fields().items()}
    for key, value in expected.items():
        if key in fields and fields[key] != value:
            raise DataError(f"{path}: grid mismatch, {key}={fields[key]} but config gives {value}")


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def dataset_stats(dataset: Dataset) -> dict:
    lengths = np.array([len(t) for t in dataset.trajectories], dtype=float)
    occupied = {c for t in dataset.trajectories for c in t.cells}
    return {
        "n_trajectories": len(dataset),
        "n_occupied_cells": len(occupied),
        "max_length": int(lengths.max()) if lengths.size else 0,
        "avg_length": float(lengths.mean()) if lengths.size else 0.0,
        "std_length": float(lengths.std()) if lengths.size else 0.0,
    }
