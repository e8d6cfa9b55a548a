"""Transition probability generator: next-hop distribution over relative offsets."""
from __future__ import annotations


import numpy as np

from .accountant import PrivacyLedger
from .dpsgd import DpSgdConfig, TrainResult, sample_batch_tpg, train
from .errors import DataError
from .grid import (GridSpec, NeighborhoodSpec, OccupiedCellIndex, grid_from_dict, grid_to_dict,
                   neighbor_table)
from .nn import TpgNetwork, load_model, save_model
from .preprocess import TransitionSet


def masked_distribution(dist, current: int, grid: GridSpec, nb: NeighborhoodSpec,
                        index: OccupiedCellIndex | None = None) -> np.ndarray:
    """Restrict a next-hop distribution to valid neighbor cells and renormalize.

    The center class, off-grid targets and (if ``index`` is given) targets
    outside the index get zero mass. If nothing valid keeps mass, the result
    is uniform over the valid classes (all zeros when there are none).
    """
    dist = np.asarray(dist, dtype=float)
    valid = valid_classes(current, grid, nb, index)
    out = np.where(valid, dist, 0.0)
    total = out.sum()
    if total > 0:
        return out / total
    return valid / valid.sum() if valid.any() else out


def valid_classes(current: int, grid: GridSpec, nb: NeighborhoodSpec,
                  index: OccupiedCellIndex | None = None) -> np.ndarray:
    row, col = grid.rowcol(current)
    dr, dc = np.divmod(np.arange(nb.class_count), nb.width)
    tr, tc = row + dr - nb.s, col + dc - nb.s
    ok = (tr >= 0) & (tr < grid.n_rows) & (tc >= 0) & (tc < grid.n_cols)
    ok[nb.center_class] = False
    if index is not None:
        targets = np.where(ok, tr * grid.n_cols + tc, -1)
        ok &= index.dense_or_missing(targets) >= 0
    return ok


def offset_distance_m(cls_a, cls_b, grid: GridSpec, nb: NeighborhoodSpec):
    """Distance between the targets of two classes relative to the same cell."""
    ra, ca = np.divmod(cls_a, nb.width)
    rb, cb = np.divmod(cls_b, nb.width)
    return grid.cell_size * np.hypot(ra - rb, ca - cb)


def prediction_error_meters(dist, label: int, grid: GridSpec, nb: NeighborhoodSpec) -> float:
    """Distance between the argmax target cell and the true target cell (ties -> lowest class)."""
    return float(offset_distance_m(int(np.argmax(dist)), label, grid, nb))


class TransitionModel:
    def __init__(self, index: OccupiedCellIndex, nb: NeighborhoodSpec = NeighborhoodSpec(),
                 network: TpgNetwork | None = None, embed_dim: int = 50, hidden: int = 200, seed: int = 0):
        self.index, self.nb = index, nb
        self.network = network or TpgNetwork(len(index), embed_dim=embed_dim, hidden=hidden,
                                             n_classes=nb.class_count, seed=seed)
        if self.network.n_cells != len(index) or self.network.n_classes != nb.class_count:
            raise ValueError("network shape does not match the cell index / neighborhood")
        targets = neighbor_table(self.grid, nb)[index.cells]
        # dense index of each (occupied cell, class) target; -1 if not a valid edge
        self.targets = index.dense_or_missing(targets)
        self.targets[:, nb.center_class] = -1
        self.n_records = None

    @property
    def grid(self) -> GridSpec:
        return self.index.grid

    def forward(self, current: int, dst: int, hour: int) -> np.ndarray:
        """Next-hop distribution over all (2s+1)^2 classes."""
        if not 0 <= hour < self.network.n_hours:
            raise ValueError("hour outside [0, 24)")
        cur, d = self.index.dense([current, dst])
        return self.network.probs([cur], [d], [hour])[0]

    def forward_dense(self, cur, dst, hour) -> np.ndarray:
        return self.network.probs(cur, dst, hour)

    def masked(self, dist, current: int) -> np.ndarray:
        return masked_distribution(dist, current, self.grid, self.nb, self.index)

    def _dense_set(self, tset: TransitionSet):
        return (self.index.dense(tset.current), self.index.dense(tset.destination),
                np.asarray(tset.hour), np.asarray(tset.label))

    def train(self, tset: TransitionSet, cfg: DpSgdConfig, ledger: PrivacyLedger | None = None) -> TrainResult:
        """DP-SGD where each batch slot picks a trajectory, then one of its samples."""
        if tset.n_trajectories == 0:
            raise DataError("no transition samples to train on")
        cur, dst, hour, label = self._dense_set(tset)
        offsets = tset.offsets

        def make_batch(rng, _latent_rng):
            rows, _ = sample_batch_tpg(offsets, cfg.batch_size, rng)
            return {"cur": cur[rows], "dst": dst[rows], "hour": hour[rows], "label": label[rows]}

        self.n_records = tset.n_trajectories
        return train(self.network, tset.n_trajectories, make_batch, cfg, ledger)

    def diagnostics(self, tset: TransitionSet, chunk: int = 8192) -> dict:
        """Mean loss, top-1 accuracy and mean argmax error in meters."""
        cur, dst, hour, label = self._dense_set(tset)
        loss, hits, err = 0.0, 0, 0.0
        for i in range(0, len(label), chunk):
            sl = slice(i, i + chunk)
            p = self.network.probs(cur[sl], dst[sl], hour[sl])
            pred = np.argmax(p, axis=1)
            loss += float(-np.log(np.maximum(p[np.arange(len(pred)), label[sl]], 1e-12)).sum())
            hits += int(np.sum(pred == label[sl]))
            err += float(offset_distance_m(pred, label[sl], self.grid, self.nb).sum())
        n = max(len(label), 1)
        return {"loss": loss / n, "accuracy": hits / n, "error_m": err / n, "n_samples": len(label)}

    def save(self, path, extra: dict | None = None):
        meta = {"grid": grid_to_dict(self.grid), "cells": self.index.cells.tolist(), "s": self.nb.s,
                "n_records": self.n_records}
        meta.update(extra or {})
        save_model(path, self.network, meta)

    @classmethod
    def load(cls, path) -> "TransitionModel":
        network, meta = load_model(path, "TPG")
        grid = grid_from_dict(meta["grid"])
        model = cls(OccupiedCellIndex(meta["cells"], grid), NeighborhoodSpec(int(meta["s"])), network)
        model.n_records = meta.get("n_records")
        model.meta = meta
        return model
