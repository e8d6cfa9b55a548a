"""Trajectory initializer: a VAE over (source, destination, hour) triples."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .accountant import PrivacyLedger
from .dpsgd import DpSgdConfig, TrainResult, sample_batch_ti, train
from .errors import DataError
from .grid import N_HOURS, OccupiedCellIndex, grid_from_dict, grid_to_dict
from .nn import TiNetwork, cross_entropy, kl_standard_normal, load_model, save_model
from .preprocess import Trajectory


@dataclass(frozen=True)
class EndpointTriple:
    src: int  # full-grid cell ids
    dst: int
    hour: int


def sample_categorical(probs, rng):
    """One draw per row of ``probs`` by inverse CDF."""
    cdf = np.cumsum(probs, axis=1)
    u = rng.random((len(probs), 1)) * cdf[:, -1:]
    return np.minimum((cdf <= u).sum(axis=1), probs.shape[1] - 1)


class TrajectoryInitializer:
    def __init__(self, index: OccupiedCellIndex, network: TiNetwork | None = None,
                 hidden: int = 100, latent: int = 50, seed: int = 0):
        self.index = index
        self.network = network or TiNetwork(len(index), hidden=hidden, latent=latent, seed=seed)
        if self.network.n_cells != len(index):
            raise ValueError("network size does not match the cell index")
        self.n_records = None

    @property
    def grid(self):
        return self.index.grid

    def _dense(self, triples: Sequence[EndpointTriple]):
        src = self.index.dense([t.src for t in triples])
        dst = self.index.dense([t.dst for t in triples])
        hour = np.array([t.hour for t in triples], dtype=np.int64)
        if np.any((hour < 0) | (hour >= N_HOURS)):
            raise ValueError("hour outside [0, 24)")
        return src, dst, hour

    def encode_input(self, triple: EndpointTriple) -> np.ndarray:
        """Concatenated one-hot(src) | one-hot(dst) | one-hot(hour)."""
        src, dst, hour = self._dense([triple])
        x = np.zeros(self.network.input_dim)
        x[self.network.onehot_index(src, dst, hour)[0]] = 1.0
        return x

    def loss(self, triple: EndpointTriple, noise) -> float:
        """KL term plus the three heads' cross-entropies at latent noise ``noise``."""
        src, dst, hour = self._dense([triple])
        net = self.network
        _, _, _, mean, log_var = net.encode(src, dst, hour)
        z = mean + np.exp(0.5 * log_var) * np.asarray(noise, dtype=float)[None, :]
        _, heads = net.decode(z)
        rec = sum(cross_entropy(p[0], int(l[0])) for p, l in zip(heads, (src, dst, hour)))
        return float(kl_standard_normal(mean[0], log_var[0]) + rec)

    def records(self, trajectories: Sequence[Trajectory]):
        return self._dense([EndpointTriple(t.src, t.dst, t.hour) for t in trajectories])

    def train(self, trajectories: Sequence[Trajectory], cfg: DpSgdConfig,
              ledger: PrivacyLedger | None = None) -> TrainResult:
        """DP-SGD with Poisson sampling, one record per trajectory."""
        if not trajectories:
            raise DataError("cannot train on an empty dataset")
        src, dst, hour = self.records(trajectories)
        n = len(src)
        q = cfg.sampling_rate(n)
        latent = self.network.latent

        def make_batch(rng, latent_rng):
            rows = sample_batch_ti(n, q, rng)
            if rows.size == 0:
                return {}
            return {"src": src[rows], "dst": dst[rows], "hour": hour[rows],
                    "noise": latent_rng.standard_normal((rows.size, latent))}

        self.n_records = n
        return train(self.network, n, make_batch, cfg, ledger)

    def head_distributions(self, z):
        _, heads = self.network.decode(np.atleast_2d(z))
        return heads

    def sample(self, rng, n: int | None = None):
        """Draw z ~ N(0, I), decode, then draw each head independently.

        Returns one :class:`EndpointTriple`, or a list when ``n`` is given.
        """
        m = 1 if n is None else n
        z = rng.standard_normal((m, self.network.latent))
        ps, pd, ph = self.head_distributions(z)
        src = self.index.cell(sample_categorical(ps, rng))
        dst = self.index.cell(sample_categorical(pd, rng))
        hour = sample_categorical(ph, rng)
        out = [EndpointTriple(int(s), int(d), int(h)) for s, d, h in zip(src, dst, hour)]
        return out[0] if n is None else out

    def save(self, path, extra: dict | None = None):
        meta = {"grid": grid_to_dict(self.grid), "cells": self.index.cells.tolist(),
                "n_records": self.n_records}
        meta.update(extra or {})
        save_model(path, self.network, meta)

    @classmethod
    def load(cls, path) -> "TrajectoryInitializer":
        network, meta = load_model(path, "TI")
        grid = grid_from_dict(meta["grid"])
        model = cls(OccupiedCellIndex(meta["cells"], grid), network)
        model.n_records = meta.get("n_records")
        model.meta = meta
        return model
