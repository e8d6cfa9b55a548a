"""Utility metrics between an original and a synthetic dataset.

* trip-length Jensen-Shannon divergence per hour (base 2, so in [0, 1])
* true-positive ratio of the top-K frequent location patterns
* per-hour Earth Mover's Distance between source/destination pair distributions
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import sparse
from scipy.optimize import linprog

from .grid import GridSpec
from .preprocess import Dataset, Trajectory

TPR_KS = (10, 20, 50, 100)
MIN_PATTERN, MAX_PATTERN = 2, 8
EMD_SAMPLE_CAP = 2000


# -- trip length ------------------------------------------------------------------

def length_histogram(trajectories: Iterable[Trajectory]) -> dict[int, float]:
    counts = Counter(len(t) for t in trajectories)
    total = sum(counts.values())
    return {k: v / total for k, v in sorted(counts.items())} if total else {}


def jsd(p: dict, q: dict) -> float:
    """Jensen-Shannon divergence (log base 2) between two histograms given as dicts."""
    keys = sorted(set(p) | set(q))
    a = np.array([p.get(k, 0.0) for k in keys])
    b = np.array([q.get(k, 0.0) for k in keys])
    m = 0.5 * (a + b)

    def kl(x):
        nz = x > 0
        return float(np.sum(x[nz] * np.log2(x[nz] / m[nz])))

    return min(1.0, max(0.0, 0.5 * kl(a) + 0.5 * kl(b)))


def trip_length_jsd(d: Dataset, d2: Dataset, hour: int) -> float | None:
    """JSD of trip-length histograms in ``hour``; None if either side is empty there."""
    a, b = d.in_hour(hour), d2.in_hour(hour)
    if not a or not b:
        return None
    return jsd(length_histogram(a), length_histogram(b))


# -- frequent patterns ------------------------------------------------------------

def ngram_counts(trajectories: Iterable[Trajectory], min_len: int = MIN_PATTERN,
                 max_len: int = MAX_PATTERN) -> Counter:
    """Number of trajectories containing each contiguous n-gram (once per trajectory)."""
    counts = Counter()
    for t in trajectories:
        cells = t.cells
        seen = set()
        for n in range(min_len, min(max_len, len(cells)) + 1):
            for i in range(len(cells) - n + 1):
                seen.add(cells[i:i + n])
        counts.update(seen)
    return counts


def top_k_patterns(counts: Counter, k: int) -> list[tuple]:
    """Top-k patterns by count, ties broken by lexicographic cell order."""
    return sorted(counts, key=lambda p: (-counts[p], p))[:k]


def frequent_pattern_tpr(d: Dataset, d2: Dataset, k: int, counts=None) -> tuple[float | None, int]:
    """|top_K(D) & top_K(D')| / K_used with K_used = min(K, #patterns in D, #patterns in D').

    Returns ``(ratio, k_used)``; ratio is None when either side has no patterns.
    """
    if k < 1:
        raise ValueError("K must be >= 1")
    ca, cb = counts if counts is not None else (ngram_counts(d.trajectories), ngram_counts(d2.trajectories))
    k_used = min(k, len(ca), len(cb))
    if k_used == 0:
        return None, 0
    hits = set(top_k_patterns(ca, k_used)) & set(top_k_patterns(cb, k_used))
    return len(hits) / k_used, k_used


# -- source/destination EMD -------------------------------------------------------

@dataclass
class PairDistribution:
    support: list[tuple[int, int]]
    counts: np.ndarray  # integer multiplicities, same order as support

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def mass(self) -> np.ndarray:
        return self.counts / self.total


def pair_distribution(trajectories: Sequence[Trajectory]) -> PairDistribution:
    counts = Counter((t.src, t.dst) for t in trajectories)
    support = sorted(counts)
    return PairDistribution(support, np.array([counts[p] for p in support], dtype=np.int64))


def pair_ground_distance(a: PairDistribution, b: PairDistribution, grid: GridSpec) -> np.ndarray:
    """Meters between pairs: distance of the sources plus distance of the destinations."""
    def coords(cells):
        r, c = np.divmod(np.asarray(cells, dtype=np.int64), grid.n_cols)
        return r.astype(float), c.astype(float)

    sa, da = zip(*a.support)
    sb, db = zip(*b.support)
    (r1, c1), (r2, c2) = coords(sa), coords(sb)
    (r3, c3), (r4, c4) = coords(da), coords(db)
    src = np.hypot(r1[:, None] - r2[None, :], c1[:, None] - c2[None, :])
    dst = np.hypot(r3[:, None] - r4[None, :], c3[:, None] - c4[None, :])
    return grid.cell_size * (src + dst)


def transport_cost(supply, demand, cost) -> float:
    """Optimal cost of the balanced transportation problem, normalized by total mass.

    ``supply`` and ``demand`` are non-negative weights (rescaled internally so
    both sum to 1). Solved as a linear program with the HiGHS dual simplex.
    """
    a = np.asarray(supply, dtype=float)
    b = np.asarray(demand, dtype=float)
    cost = np.asarray(cost, dtype=float)
    if a.sum() <= 0 or b.sum() <= 0:
        raise ValueError("empty distribution")
    a, b = a / a.sum(), b / b.sum()
    m, n = cost.shape
    if m == 1 or n == 1:
        # the plan is forced
        return float(np.sum(cost * (a[:, None] * b[None, :])))
    rows = sparse.kron(sparse.identity(m, format="csr"), np.ones((1, n)), format="csr")
    cols = sparse.kron(np.ones((1, m)), sparse.identity(n, format="csr"), format="csr")
    # one equality is implied by the others; dropping it keeps the system full rank
    A = sparse.vstack([rows, cols[:-1]], format="csr")
    rhs = np.concatenate([a, b[:-1]])
    res = linprog(cost.ravel(), A_eq=A, b_eq=rhs, bounds=(0, None), method="highs-ds")
    if res.status != 0:
        raise RuntimeError(f"transportation LP failed: {res.message}")
    return float(max(res.fun, 0.0))


def sample_trips(trajectories: Sequence[Trajectory], cap: int, seed: int) -> list[Trajectory]:
    if len(trajectories) <= cap:
        return list(trajectories)
    rng = np.random.default_rng(seed)
    pick = np.sort(rng.choice(len(trajectories), size=cap, replace=False))
    return [trajectories[i] for i in pick]


def source_dest_emd(d: Dataset, d2: Dataset, hour: int, sample_cap: int = EMD_SAMPLE_CAP,
                    seed: int = 0) -> float | None:
    """EMD in meters between (src, dst) distributions of ``hour``; None if either is empty.

    Each side is subsampled to ``sample_cap`` trips with its own generator
    seeded from ``seed``, so swapping the arguments gives the same value.
    """
    a, b = d.in_hour(hour), d2.in_hour(hour)
    if not a or not b:
        return None
    pa = pair_distribution(sample_trips(a, sample_cap, seed))
    pb = pair_distribution(sample_trips(b, sample_cap, seed))
    if pa.support == pb.support and np.array_equal(pa.counts * pb.total, pb.counts * pa.total):
        return 0.0
    return transport_cost(pa.counts, pb.counts, pair_ground_distance(pa, pb, d.grid))


# -- report -------------------------------------------------------------------------

@dataclass
class MetricValue:
    metric: str
    hour: int | None
    k: int | None
    value: float | None
    k_used: int | None = None

    def line(self) -> str:
        h = "-" if self.hour is None else str(self.hour)
        k = "-" if self.k is None else str(self.k)
        v = "absent" if self.value is None else format(self.value, ".6g")
        extra = "" if self.k_used is None or self.k_used == self.k else f" k_used={self.k_used}"
        return f"metric={self.metric} hour={h} k={k} value={v}{extra}"


def evaluate(d: Dataset, d2: Dataset, ks: Sequence[int] = TPR_KS, sample_cap: int = EMD_SAMPLE_CAP,
             seed: int = 0, hours: Iterable[int] | None = None) -> list[MetricValue]:
    """Full metric suite: JSD and EMD for every hour in either dataset, TPR for each K."""
    if d.grid != d2.grid:
        raise ValueError("datasets use different grids")
    hours = sorted(set(hours) if hours is not None else d.hours() | d2.hours())
    out = [MetricValue("jsd", h, None, trip_length_jsd(d, d2, h)) for h in hours]
    counts = (ngram_counts(d.trajectories), ngram_counts(d2.trajectories))
    for k in ks:
        value, used = frequent_pattern_tpr(d, d2, k, counts)
        out.append(MetricValue("tpr", None, k, value, used))
    out += [MetricValue("emd", h, None, source_dest_emd(d, d2, h, sample_cap, seed)) for h in hours]
    return out


def format_report(values: Sequence[MetricValue]) -> str:
    return "".join(v.line() + "\n" for v in values)


def summarize(values: Sequence[MetricValue]) -> dict:
    """Mean of each metric over the instances where it is defined."""
    out = {}
    for name in ("jsd", "tpr", "emd"):
        vals = [v.value for v in values if v.metric == name and v.value is not None]
        out[name] = float(np.mean(vals)) if vals else math.nan
    return out
