import datetime as dt
from collections import Counter
from zoneinfo import ZoneInfo

import numpy as np
import pytest

from dptraj.errors import ConfigError, DataError
from dptraj.grid import relative_offset
from dptraj.preprocess import (Dataset, PreprocessSettings, RawPoint, Trajectory, aggregate_60s, assign_hour,
                               contract_self_loops, dataset_stats, default_holidays, drop_calendar,
                               extract_transition_samples, filter_speed_bbox, interpolate_gaps, is_workday,
                               load_holidays, preprocess_files, read_cabspotting, read_dataset, read_header,
                               split_trips, transition_set, write_dataset)

SF = ZoneInfo("America/Los_Angeles")


def ts(y, m, d, hh=10, mm=0, ss=0):
    return int(dt.datetime(y, m, d, hh, mm, ss, tzinfo=SF).timestamp())


WED = ts(2008, 5, 21)


def pt(lat, lon, occ, t, taxi="a"):
    return RawPoint(taxi, lat, lon, bool(occ), t)


def test_split_trips_runs():
    pts = [pt(37.7, -122.4, o, i) for i, o in enumerate([0, 1, 1, 0, 1])]
    trips = split_trips(pts)
    assert [len(t) for t in trips] == [2, 1]
    assert split_trips([pt(37.7, -122.4, 0, i) for i in range(5)]) == []


def test_split_trips_counts_transitions(rng):
    occ = rng.integers(0, 2, size=500)
    pts = [pt(37.7, -122.4, o, i) for i, o in enumerate(occ)]
    starts = int(occ[0] == 1) + int(np.sum((occ[1:] == 1) & (occ[:-1] == 0)))
    assert len(split_trips(pts)) == starts


def test_speed_and_box(sf_grid):
    # ~5 km north in 60 s is 300 km/h
    fast = [pt(37.70, -122.45, 1, 0), pt(37.70 + 5000 / 111195.08, -122.45, 1, 60)]
    assert filter_speed_bbox(fast, sf_grid) == (None, "speed")
    still = [pt(37.7, -122.45, 1, 0), pt(37.7, -122.45, 1, 60)]
    assert filter_speed_bbox(still, sf_grid)[0] == still
    out = [pt(sf_grid.lat_max + 0.01, -122.45, 1, 0), pt(37.7, -122.45, 1, 60)]
    assert filter_speed_bbox(out, sf_grid) == (None, "out_of_box")


def test_aggregate_windows():
    assert aggregate_60s([(5, t) for t in range(0, 60, 10)]) == [(5, 0)]
    assert aggregate_60s([(1, 0), (1, 20), (2, 40)]) == [(1, 0)]
    assert aggregate_60s([(1, 0), (2, 30)]) == [(1, 0)]
    assert aggregate_60s([(2, 0), (1, 30)]) == [(2, 0)]
    assert aggregate_60s([(1, 0), (2, 61), (3, 125)]) == [(1, 0), (2, 60), (3, 120)]


def test_interpolation(grid10):
    g = grid10
    parts = interpolate_gaps([(g.cell(0, 0), 0), (g.cell(0, 4), 240)], g)
    assert parts == [[(0, 0), (1, 60), (2, 120), (3, 180), (4, 240)]]
    assert interpolate_gaps([(0, 0), (4, 300)], g) == [[(0, 0)], [(4, 300)]]
    assert interpolate_gaps([(0, 0), (1, 60)], g) == [[(0, 0), (1, 60)]]


def test_contract_self_loops():
    assert contract_self_loops([(1, 0), (1, 60), (2, 120)]) == [(1, 0), (2, 120)]
    assert contract_self_loops([(1, 0), (1, 60)]) == [(1, 0)]
    alt = [(1, 0), (2, 60), (1, 120)]
    assert contract_self_loops(alt) == alt


def test_assign_hour():
    visits = [(i % 2 + 1, ts(2008, 5, 21, 17, 58) + 60 * i) for i in range(12)]
    assert assign_hour(visits).hour == 18
    assert assign_hour([(1, ts(2008, 5, 21, 7, 0)), (2, ts(2008, 5, 21, 7, 30))]).hour == 7
    tie = [(i % 2 + 1, ts(2008, 5, 21, 9, 54) + 60 * i) for i in range(12)]
    assert assign_hour(tie).hour == 9


def test_calendar():
    hol = default_holidays()
    assert is_workday(WED, hol)
    assert not is_workday(ts(2008, 5, 24), hol)  # Saturday
    assert not is_workday(ts(2008, 5, 26), hol)  # Memorial Day
    trips = [[(1, WED)], [(1, ts(2008, 5, 24))]]
    assert drop_calendar(trips, hol) == [[(1, WED)]]


def test_holiday_file_errors(tmp_path):
    bad = tmp_path / "h.txt"
    bad.write_text("2008-13-01\n")
    with pytest.raises(ConfigError):
        load_holidays(bad)
    with pytest.raises(ConfigError):
        load_holidays(tmp_path / "missing.txt")


def test_transition_samples(grid10, nb5):
    a, b, c = grid10.cell(2, 2), grid10.cell(2, 3), grid10.cell(3, 4)
    samples = extract_transition_samples(Trajectory((a, b, c), 8), grid10, nb5)
    assert [(s.current, s.destination, s.hour, s.label) for s in samples] == [
        (a, c, 8, relative_offset(a, b, grid10, nb5)), (b, c, 8, relative_offset(b, c, grid10, nb5))]
    assert len(extract_transition_samples(Trajectory((a, b), 0), grid10, nb5)) == 1
    assert all(s.label != nb5.center_class for s in samples)


def test_transition_set_offsets(grid10, nb5):
    trajs = [Trajectory((0, 1, 2), 1), Trajectory((5, 6), 2)]
    ts_ = transition_set(trajs, grid10, nb5)
    assert list(ts_.offsets) == [0, 2, 3]
    assert list(ts_.traj_id) == [0, 0, 1]
    assert list(ts_.destination) == [2, 2, 6]


def test_trajectory_invariants():
    with pytest.raises(ValueError):
        Trajectory((1,), 0)
    with pytest.raises(ValueError):
        Trajectory((1, 1, 2), 0)
    with pytest.raises(ValueError):
        Trajectory((1, 2), 24)


def _write_taxi(path, rows):
    path.write_text("".join(f"{lat} {lon} {occ} {t}\n" for lat, lon, occ, t in rows))


def _taxi_rows(grid, start):
    # one passenger trip heading east through several cells, stored newest first
    rows = [(37.70, -122.45, 0, start - 60)]
    for i in range(8):
        rows.append((37.70, -122.45 + i * 0.004, 1, start + 60 * i))
    rows.append((37.70, -122.40, 0, start + 600))
    return rows[::-1]


def test_read_cabspotting_sorts_and_counts(tmp_path):
    p = tmp_path / "new_abc.txt"
    p.write_text("37.7 -122.4 1 200\n37.7 -122.4 1 100\nbad row\n37.7 -122.4 1 100\n")
    errors = Counter()
    pts = read_cabspotting(p, errors=errors)
    assert [q.timestamp for q in pts] == [100, 200]
    assert pts[0].taxi_id == "abc"
    assert errors == Counter(malformed_row=1, duplicate_timestamp=1)


def test_preprocess_files_end_to_end(tmp_path, sf_grid):
    _write_taxi(tmp_path / "new_a.txt", _taxi_rows(sf_grid, WED))
    _write_taxi(tmp_path / "new_b.txt", _taxi_rows(sf_grid, ts(2008, 5, 24)))  # weekend
    settings = PreprocessSettings(holidays=default_holidays())
    ds, reasons = preprocess_files(sorted(tmp_path.glob("*.txt")), sf_grid, settings)
    assert len(ds) == 1 and reasons["calendar"] == 1
    t = ds.trajectories[0]
    assert t.hour == 10
    assert all(a != b for a, b in zip(t.cells, t.cells[1:]))
    ds2, _ = preprocess_files(sorted(tmp_path.glob("*.txt")), sf_grid, settings, workers=2)
    assert ds2.trajectories == ds.trajectories
    with pytest.raises(DataError):
        preprocess_files([], sf_grid)


def test_dataset_file_roundtrip(tmp_path, grid10):
    ds = Dataset([Trajectory((0, 1, 12), 3), Trajectory((99, 88), 23)], grid10)
    p = tmp_path / "d.ptraj"
    write_dataset(p, ds)
    first = p.read_bytes()
    assert p.read_text().splitlines()[0] == "#PTRAJ-DS v1 rows=10 cols=10 cell=500"
    assert read_dataset(p, grid10).trajectories == ds.trajectories
    write_dataset(p, ds)
    assert p.read_bytes() == first
    write_dataset(p, ds, synthetic=True)
    assert read_header(p)["synthetic"] == "1"


def test_dataset_grid_mismatch(tmp_path, grid10, sf_grid):
    p = tmp_path / "d.ptraj"
    write_dataset(p, Dataset([Trajectory((0, 1), 3)], grid10))
    with pytest.raises(DataError):
        read_dataset(p, sf_grid)


def test_stats(grid10):
    ds = Dataset([Trajectory((0, 1, 2), 3), Trajectory((5, 6), 4)], grid10)
    s = dataset_stats(ds)
    assert s["n_trajectories"] == 2 and s["n_occupied_cells"] == 5
    assert s["max_length"] == 3 and s["avg_length"] == 2.5 and s["std_length"] == 0.5
