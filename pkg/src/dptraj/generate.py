"""Synthetic trace reconstruction by most-probable-path search.

For a sampled (source, destination, hour) the routing graph has an edge from
every indexed cell to each valid neighbor within radius s, weighted by
-ln p of the masked next-hop probability. The shortest path under these
weights is the path with the largest product of transition probabilities.
"""
from __future__ import annotations

import heapq
import math
import warnings
from collections import Counter, OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .nn import FLOOR
from .preprocess import Dataset, Trajectory
from .ti import TrajectoryInitializer
from .tpg import TransitionModel


MAX_WEIGHT = -math.log(FLOOR)


class NoPath(LookupError):
    """The destination is unreachable from the source."""


def edge_weight(p: float) -> float:
    return -math.log(max(p, FLOOR))


class ExplicitGraph:
    """Routing graph given as ``{node: [(neighbor, probability), ...]}``."""

    def __init__(self, edges: dict):
        self.edges = edges

    def neighbors(self, node):
        return [(v, edge_weight(p)) for v, p in self.edges.get(node, ())]


class RoutingGraph:
    """Implicit routing graph for one (destination, hour) context.

    Next-hop distributions for all indexed cells are computed in one batched
    forward pass on first use; neighbor lists are then built per node on demand.
    """

    def __init__(self, model: TransitionModel, dst: int, hour: int):
        self.model, self.dst, self.hour = model, dst, hour
        self._probs = None
        self._adj = {}

    def _distributions(self):
        if self._probs is None:
            m = self.model
            n = len(m.index)
            d = m.index.dense(self.dst)
            probs = m.forward_dense(np.arange(n), np.full(n, d), np.full(n, self.hour))
            valid = m.targets >= 0
            probs = np.where(valid, probs, 0.0)
            total = probs.sum(axis=1, keepdims=True)
            counts = valid.sum(axis=1, keepdims=True)
            uniform = np.where(valid, 1.0 / np.maximum(counts, 1), 0.0)
            self._probs = np.where(total > 0, probs / np.where(total > 0, total, 1.0), uniform)
        return self._probs

    def neighbors(self, node: int):
        adj = self._adj.get(node)
        if adj is None:
            m = self.model
            i = m.index.dense(node)
            p = self._distributions()[i]
            cls = np.nonzero(m.targets[i] >= 0)[0]
            w = -np.log(np.maximum(p[cls], FLOOR))
            cells = m.index.cells[m.targets[i, cls]]
            adj = list(zip(cells.tolist(), w.tolist()))
            self._adj[node] = adj
        return adj


def most_probable_path(graph, src, dst) -> tuple[list, float]:
    """Dijkstra over ``graph.neighbors``; returns ``(path, total_weight)``.

    Ties are broken by (total weight, path length, lexicographic node order).
    """
    best = {src: (0.0, 1, (src,))}
    heap = [(0.0, 1, (src,))]
    done = set()
    while heap:
        w, n, path = heapq.heappop(heap)
        node = path[-1]
        if node in done:
            continue
        done.add(node)
        if node == dst:
            return list(path), w
        for nxt, wt in graph.neighbors(node):
            if nxt in done:
                continue
            label = (w + wt, n + 1, path + (nxt,))
            if nxt not in best or label < best[nxt]:
                best[nxt] = label
                heapq.heappush(heap, label)
    raise NoPath(f"{dst} unreachable from {src}")


def path_weight(graph, path) -> float:
    total = 0.0
    for a, b in zip(path, path[1:]):
        total += dict(graph.neighbors(a))[b]
    return total


@dataclass
class GenerationResult:
    dataset: Dataset
    counters: Counter = field(default_factory=Counter)
    skipped: int = 0

    @property
    def retry_warning(self) -> bool:
        n = len(self.dataset) + self.skipped
        return n > 0 and self.skipped > 0.01 * n


class TraceGenerator:
    """Samples endpoint triples from the initializer and routes them.

    Only model parameters and the grid are used; the training data never is.
    """

    def __init__(self, ti: TrajectoryInitializer, tpg: TransitionModel, max_retries: int = 20,
                 cache_size: int = 256):
        if ti.grid != tpg.grid or not np.array_equal(ti.index.cells, tpg.index.cells):
            raise ValueError("TI and TPG models were trained on different grids or cell indexes")
        self.ti, self.tpg = ti, tpg
        self.max_retries = max_retries
        self.cache_size = cache_size
        self._graphs = OrderedDict()

    def graph(self, dst: int, hour: int) -> RoutingGraph:
        key = (dst, hour)
        g = self._graphs.get(key)
        if g is None:
            g = RoutingGraph(self.tpg, dst, hour)
            self._graphs[key] = g
            if len(self._graphs) > self.cache_size:
                self._graphs.popitem(last=False)
        else:
            self._graphs.move_to_end(key)
        return g

    def route(self, src: int, dst: int, hour: int) -> list:
        path, _ = most_probable_path(self.graph(dst, hour), src, dst)
        return path

    def one(self, rng, counters: Counter) -> Trajectory | None:
        for _ in range(self.max_retries):
            t = self.ti.sample(rng)
            if t.src == t.dst:
                counters["src_eq_dst"] += 1
                continue
            try:
                path = self.route(t.src, t.dst, t.hour)
            except NoPath:
                counters["no_path"] += 1
                continue
            return Trajectory(tuple(path), t.hour)
        return None

    def generate(self, n: int, seed: int = 0) -> GenerationResult:
        """``n`` synthetic trajectories; trajectory i uses the stream (seed, i)."""
        counters = Counter()
        out, skipped = [], 0
        for i in range(n):
            t = self.one(np.random.default_rng([seed, i]), counters)
            if t is None:
                skipped += 1
            else:
                out.append(t)
        result = GenerationResult(Dataset(out, self.ti.grid), counters, skipped)
        result.counters["skipped"] = skipped
        if result.retry_warning:
            warnings.warn(f"retry budget exhausted for {skipped} of {n} draws", RuntimeWarning)
        return result


def generate(ti: TrajectoryInitializer, tpg: TransitionModel, n: int, seed: int = 0,
             max_retries: int = 20) -> GenerationResult:
    return TraceGenerator(ti, tpg, max_retries).generate(n, seed)
