import itertools
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dptraj.metrics import (PairDistribution, evaluate, format_report, frequent_pattern_tpr, jsd,
                            length_histogram, ngram_counts, pair_distribution, pair_ground_distance,
                            source_dest_emd, top_k_patterns, transport_cost, trip_length_jsd)
from dptraj.preprocess import Dataset, Trajectory
from dptraj.toy import toy_dataset
from oracles import brute_force_transport


def ds(grid, rows):
    return Dataset([Trajectory(tuple(c), h) for h, c in rows], grid)


def test_jsd_examples(grid10):
    assert jsd({2: 0.5, 3: 0.5}, {2: 0.5, 3: 0.5}) == 0
    assert jsd({2: 1.0}, {3: 1.0}) == pytest.approx(1.0)
    assert jsd({2: 0.5, 3: 0.5}, {2: 1.0}) == pytest.approx(0.3113, abs=1e-4)
    a = ds(grid10, [(1, (0, 1)), (1, (0, 1, 2))])
    assert trip_length_jsd(a, a, 1) == 0
    assert trip_length_jsd(a, a, 2) is None


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0.01, 1), min_size=1, max_size=6), st.lists(st.floats(0.01, 1), min_size=1, max_size=6))
def test_jsd_bounds_and_symmetry(p, q):
    P = {i: v / sum(p) for i, v in enumerate(p)}
    Q = {i + 2: v / sum(q) for i, v in enumerate(q)}
    assert 0 <= jsd(P, Q) <= 1
    assert jsd(P, Q) == pytest.approx(jsd(Q, P), abs=1e-12)


def test_length_histogram(grid10):
    h = length_histogram(ds(grid10, [(0, (0, 1)), (0, (0, 1, 2)), (0, (4, 5))]).trajectories)
    assert h == pytest.approx({2: 2 / 3, 3: 1 / 3})


def brute_patterns(trajs):
    counts = Counter()
    for t in trajs:
        found = set()
        for i, j in itertools.combinations(range(len(t.cells) + 1), 2):
            if 2 <= j - i <= 8:
                found.add(t.cells[i:j])
        for p in found:
            counts[p] += 1
    return counts


def test_patterns_hand_counted(grid10):
    d = ds(grid10, [(0, (1, 2, 3)), (0, (1, 2, 1, 2)), (0, (5, 1, 2))])
    counts = ngram_counts(d.trajectories)
    assert counts == brute_patterns(d.trajectories)
    assert counts[(1, 2)] == 3  # counted once per trajectory
    assert top_k_patterns(counts, 3) == [(1, 2), (1, 2, 1), (1, 2, 1, 2)]


def test_tpr_examples(grid10):
    d = ds(grid10, [(0, (1, 2, 3)), (1, (3, 4))])
    assert frequent_pattern_tpr(d, d, 10) == (1.0, 4)
    e = ds(grid10, [(0, (50, 51, 52)), (1, (60, 61))])
    assert frequent_pattern_tpr(d, e, 3) == (0.0, 3)
    with pytest.raises(ValueError):
        frequent_pattern_tpr(d, d, 0)


def test_emd_examples(grid10):
    g = grid10
    p = ds(g, [(0, (g.cell(0, 0), g.cell(0, 1), g.cell(5, 5)))])
    q = ds(g, [(0, (g.cell(0, 1), g.cell(5, 5)))])
    assert source_dest_emd(p, p, 0) == 0
    assert source_dest_emd(p, q, 0) == pytest.approx(500.0)
    assert source_dest_emd(p, q, 3) is None


def test_ground_distance(grid10):
    a = PairDistribution([(0, 11)], np.array([1]))
    b = PairDistribution([(1, 11), (0, 22)], np.array([1, 1]))
    assert np.allclose(pair_ground_distance(a, b, grid10), [[500, 500 * np.sqrt(2)]])


@pytest.mark.parametrize("seed", range(20))
def test_transport_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    m, n = rng.integers(1, 6, size=2)
    a, b = rng.integers(1, 10, m), rng.integers(1, 10, n)
    cost = rng.random((m, n)) * 1000
    exact = brute_force_transport(a, b, cost)
    assert transport_cost(a, b, cost) == pytest.approx(exact, rel=1e-6, abs=1e-9)


def test_emd_triangle_and_symmetry(grid10):
    rng = np.random.default_rng(0)
    cells = list(range(0, 100, 7))

    def rand_ds():
        rows = []
        for _ in range(int(rng.integers(3, 8))):
            s, d = rng.choice(cells, 2, replace=False)
            rows.append((0, (int(s), int(d))))
        return ds(grid10, rows)

    for _ in range(10):
        x, y, z = rand_ds(), rand_ds(), rand_ds()
        xy, yz, xz = (source_dest_emd(x, y, 0), source_dest_emd(y, z, 0), source_dest_emd(x, z, 0))
        assert xz <= xy + yz + 1e-6
        assert xy == pytest.approx(source_dest_emd(y, x, 0), rel=1e-9, abs=1e-9)
        assert xy > 0 or pair_distribution(x.trajectories).support == pair_distribution(y.trajectories).support


def test_emd_sampling_deterministic():
    a = toy_dataset(3000, seed=1)
    b = toy_dataset(2500, seed=2)
    v1 = source_dest_emd(a, b, 8, sample_cap=500, seed=3)
    assert v1 == source_dest_emd(a, b, 8, sample_cap=500, seed=3)
    assert v1 == pytest.approx(source_dest_emd(b, a, 8, sample_cap=500, seed=3), rel=1e-9, abs=1e-9)


def test_evaluate_identity_and_report():
    d = toy_dataset(600, seed=0)
    vals = evaluate(d, d)
    assert all(v.value == 0 for v in vals if v.metric in ("jsd", "emd"))
    assert all(v.value == 1 for v in vals if v.metric == "tpr")
    lines = format_report(vals).splitlines()
    assert "metric=jsd hour=8 k=- value=0" in lines
    assert "metric=tpr hour=- k=10 value=1" in lines


def test_evaluate_absent_hour(grid10):
    a = ds(grid10, [(1, (0, 1)), (2, (3, 4))])
    b = ds(grid10, [(1, (0, 1))])
    lines = format_report(evaluate(a, b)).splitlines()
    assert "metric=jsd hour=2 k=- value=absent" in lines
    assert "metric=emd hour=2 k=- value=absent" in lines
