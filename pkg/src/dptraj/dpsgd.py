"""DP-SGD: trajectory-level batch sampling, per-example clipping and Gaussian noise."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .accountant import PrivacyLedger, compose, steps_per_epoch
from .errors import NumericError
from .nn import Network, per_example_norms

log = logging.getLogger(__name__)

# Independent random streams per training step; see _step_rng.
_SAMPLE, _NOISE, _LATENT = 0, 1, 2


@dataclass(frozen=True)
class DpSgdConfig:
    clip_norm: float = 1.0
    noise_multiplier: float = 1.3
    batch_size: int = 200
    learning_rate: float = 0.2
    epochs: int = 15
    seed: int = 0

    def __post_init__(self):
        if not self.clip_norm > 0:
            raise ValueError("clip_norm must be positive")
        if self.noise_multiplier < 0:
            raise ValueError("noise_multiplier must be non-negative")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")

    def sampling_rate(self, n_records: int) -> float:
        if n_records < 1:
            raise ValueError("empty dataset")
        return min(1.0, self.batch_size / n_records)


def clip(g, clip_norm: float):
    """Scale ``g`` down to L2 norm ``clip_norm`` if it is longer."""
    g = np.asarray(g, dtype=float)
    norm = np.linalg.norm(g)
    if norm <= clip_norm:
        return g.copy()
    return g * (clip_norm / norm)


def clip_factors(norms, clip_norm: float):
    """Per-example multipliers min(1, C / norm)."""
    norms = np.asarray(norms, dtype=float)
    with np.errstate(divide="ignore"):
        return np.where(norms > clip_norm, clip_norm / norms, 1.0)


def noise_like(shapes, cfg: DpSgdConfig, rng):
    """Gaussian noise with std sigma*C, drawn in the given parameter order."""
    std = cfg.noise_multiplier * cfg.clip_norm
    return [rng.normal(0.0, std, size=s) if std > 0 else np.zeros(s) for s in shapes]


def noisy_update(clipped, cfg: DpSgdConfig, rng):
    """Parameter delta from already-clipped flat per-example gradients ``(n, P)``.

    delta = -lr * (sum_i g_i + N(0, (sigma*C)^2 I)) / B with B the expected batch size.
    An empty batch gives a pure-noise step.
    """
    clipped = np.asarray(clipped, dtype=float)
    total = clipped.sum(axis=0)
    (noise,) = noise_like([total.shape], cfg, rng)
    return -cfg.learning_rate * (total + noise) / cfg.batch_size


def sample_batch_ti(n_records: int, q: float, rng) -> np.ndarray:
    """Poisson subsampling: each record independently with probability q."""
    if not 0.0 < q <= 1.0:
        raise ValueError(f"sampling rate {q} outside (0, 1]")
    return np.nonzero(rng.random(n_records) < q)[0]


def sample_batch_tpg(offsets, batch_size: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``batch_size`` times: a trajectory uniformly, then one of its samples uniformly.

    ``offsets`` delimits each trajectory's sample rows (see ``TransitionSet``).
    Returns ``(sample_rows, trajectory_ids)``.
    """
    offsets = np.asarray(offsets)
    n_traj = len(offsets) - 1
    if n_traj < 1:
        raise ValueError("no trajectories to sample from")
    counts = np.diff(offsets)
    if np.any(counts < 1):
        raise ValueError("every trajectory needs at least one transition sample")
    traj = rng.integers(0, n_traj, size=batch_size)
    rows = offsets[traj] + (rng.random(batch_size) * counts[traj]).astype(np.int64)
    return rows, traj


def _step_rng(seed: int, step: int, stream: int):
    return np.random.default_rng([seed, step, stream])


@dataclass
class TrainResult:
    network: Network
    ledger: PrivacyLedger
    losses: list = field(default_factory=list)  # mean batch loss per epoch
    steps: int = 0
    max_clipped_norm: float = 0.0
    clip_violations: int = 0


def train(network: Network, n_records: int, make_batch: Callable, cfg: DpSgdConfig,
          ledger: PrivacyLedger | None = None, on_step: Callable | None = None) -> TrainResult:
    """Run DP-SGD in place on ``network``.

    ``make_batch(sample_rng, latent_rng)`` returns the batch dict for one step.
    The clipped norm of every example is checked against C on every step.
    """
    q = cfg.sampling_rate(n_records)
    ledger = ledger if ledger is not None else PrivacyLedger(q, cfg.noise_multiplier)
    per_epoch = steps_per_epoch(n_records, cfg.batch_size)
    result = TrainResult(network, ledger)
    names = network.names
    tol = cfg.clip_norm * (1.0 + 1e-9)
    step = 0
    for epoch in range(cfg.epochs):
        epoch_losses = []
        for _ in range(per_epoch):
            batch = make_batch(_step_rng(cfg.seed, step, _SAMPLE), _step_rng(cfg.seed, step, _LATENT))
            n = network.batch_size(batch) if batch else 0
            if n:
                losses, parts = network.forward_backward(batch)
                if not np.all(np.isfinite(losses)):
                    bad = int(np.nonzero(~np.isfinite(losses))[0][0])
                    raise NumericError(f"non-finite loss at step {step}, batch example {bad}")
                norms = per_example_norms(parts)
                factors = clip_factors(norms, cfg.clip_norm)
                clipped = norms * factors
                result.clip_violations += int(np.sum(clipped > tol))
                result.max_clipped_norm = max(result.max_clipped_norm, float(clipped.max()))
                sums = [parts[k].weighted_sum(factors) for k in names]
                epoch_losses.append(float(losses.mean()))
            else:
                sums = [np.zeros_like(network.params[k]) for k in names]
            noise = noise_like([network.params[k].shape for k in names], cfg,
                               _step_rng(cfg.seed, step, _NOISE))
            for k, s, z in zip(names, sums, noise):
                network.params[k] = network.params[k] - cfg.learning_rate * (s + z) / cfg.batch_size
            ledger = compose(ledger, 1, q, cfg.noise_multiplier)
            step += 1
            if on_step is not None:
                on_step(step, network, ledger)
        result.losses.append(float(np.mean(epoch_losses)) if epoch_losses else math.nan)
        log.debug("epoch %d loss %.4f", epoch + 1, result.losses[-1])
    result.ledger, result.steps = ledger, step
    if result.clip_violations:
        raise NumericError(f"{result.clip_violations} clipped gradients exceeded C={cfg.clip_norm}")
    return result
