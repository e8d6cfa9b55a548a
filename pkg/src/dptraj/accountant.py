"""Moments accountant for the Poisson-subsampled Gaussian mechanism.

For sampling rate q and noise multiplier sigma, one step's log moment of
order lam is the larger of

    log E_{z~mu0} [(mu0(z) / mu(z))^lam]   and   log E_{z~mu} [(mu(z) / mu0(z))^lam]

with mu0 = N(0, sigma^2) and mu = (1-q) N(0, sigma^2) + q N(1, sigma^2).
Log moments add up over steps, and (eps, delta) follows from the tail bound
eps = min_lam (alpha(lam) - ln delta) / lam.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import integrate, optimize

from .errors import NumericError

DEFAULT_LAMBDAS = tuple(range(1, 65))
_TAIL = 80.0  # integrand below exp(-80) of its peak is ignored


def _log_normal(z, mean, sigma):
    return -0.5 * ((z - mean) / sigma) ** 2 - math.log(sigma * math.sqrt(2.0 * math.pi))


def _log_mixture(z, q, sigma):
    if q >= 1.0:
        return _log_normal(z, 1.0, sigma)
    return np.logaddexp(math.log1p(-q) + _log_normal(z, 0.0, sigma),
                        math.log(q) + _log_normal(z, 1.0, sigma))


def _log_integrand(z, q, sigma, lam, flipped):
    l0 = _log_normal(z, 0.0, sigma)
    l1 = _log_mixture(z, q, sigma)
    if flipped:
        return l1 + lam * (l1 - l0)
    return l0 + lam * (l0 - l1)


def _log_expectation(q, sigma, lam, flipped):
    f = lambda z: _log_integrand(z, q, sigma, lam, flipped)
    span = lam + 2.0 + 40.0 * sigma
    zs = np.linspace(-span, span, 40001)
    vals = f(zs)
    i = int(np.argmax(vals))
    step = zs[1] - zs[0]
    res = optimize.minimize_scalar(lambda z: -f(z), bounds=(zs[max(i - 1, 0)], zs[min(i + 1, len(zs) - 1)]),
                                   method="bounded", options={"xatol": 1e-10})
    zpeak = float(res.x) if -res.fun >= vals[i] else float(zs[i])
    peak = max(float(-res.fun), float(vals[i]))
    keep = np.nonzero(vals - peak > -_TAIL)[0]
    lo, hi = zs[keep[0]] - 4 * step, zs[keep[-1]] + 4 * step
    points = [p for p in (0.0, 1.0, zpeak) if lo < p < hi]
    with warnings.catch_warnings():
        warnings.simplefilter("error", integrate.IntegrationWarning)
        try:
            val, _ = integrate.quad(lambda z: math.exp(f(z) - peak), lo, hi, points=points,
                                    epsabs=1e-12, epsrel=1e-13, limit=1000)
        except integrate.IntegrationWarning as exc:
            raise NumericError(f"log-moment integration did not converge (q={q}, sigma={sigma}, "
                               f"lambda={lam}): {exc}") from None
    if not val > 0 or not math.isfinite(val):
        raise NumericError(f"invalid log-moment integral (q={q}, sigma={sigma}, lambda={lam})")
    return peak + math.log(val)


def step_log_moment(q: float, sigma: float, lam: int) -> float:
    """Log moment of order ``lam`` for one step of the subsampled Gaussian mechanism."""
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"sampling rate {q} outside [0, 1]")
    if lam <= 0:
        raise ValueError("moment order must be positive")
    if q == 0.0:
        return 0.0
    if sigma == 0.0:
        return math.inf
    if sigma < 0.0:
        raise ValueError("noise multiplier must be non-negative")
    a = max(_log_expectation(q, sigma, lam, False), _log_expectation(q, sigma, lam, True))
    return max(a, 0.0)


@lru_cache(maxsize=256)
def _cached_moments(q: float, sigma: float, lambdas: tuple) -> tuple:
    return tuple(step_log_moment(q, sigma, lam) for lam in lambdas)


def log_moments(q: float, sigma: float, lambdas=DEFAULT_LAMBDAS) -> np.ndarray:
    return np.array(_cached_moments(float(q), float(sigma), tuple(lambdas)))


@dataclass
class PrivacySpend:
    epsilon: float
    delta: float
    order: int | None = None

    @property
    def private(self) -> bool:
        return math.isfinite(self.epsilon)


@dataclass
class PrivacyLedger:
    """Accumulated log moments of one or more training phases."""

    q: float | None = None
    sigma: float | None = None
    lambdas: tuple = DEFAULT_LAMBDAS
    alpha: np.ndarray = None
    steps: int = 0
    phases: list = field(default_factory=list)

    def __post_init__(self):
        if self.alpha is None:
            self.alpha = np.zeros(len(self.lambdas))

    def __add__(self, other: "PrivacyLedger") -> "PrivacyLedger":
        if tuple(self.lambdas) != tuple(other.lambdas):
            raise ValueError("ledgers use different moment orders")
        same = (self.q, self.sigma) == (other.q, other.sigma)
        return PrivacyLedger(self.q if same else None, self.sigma if same else None, self.lambdas,
                             self.alpha + other.alpha, self.steps + other.steps,
                             self.phases + other.phases)

    def to_dict(self) -> dict:
        return {"q": self.q, "sigma": self.sigma, "steps": self.steps,
                "phases": [list(p) for p in self.phases],
                "alpha": {int(l): float(a) for l, a in zip(self.lambdas, self.alpha)}}


def compose(ledger: PrivacyLedger, steps: int, q: float | None = None, sigma: float | None = None) -> PrivacyLedger:
    """Charge ``steps`` further steps at the ledger's (or the given) q and sigma."""
    if steps < 0:
        raise ValueError("steps must be non-negative")
    q = ledger.q if q is None else q
    sigma = ledger.sigma if sigma is None else sigma
    if steps == 0:
        return PrivacyLedger(ledger.q, ledger.sigma, ledger.lambdas, ledger.alpha.copy(), ledger.steps,
                             list(ledger.phases))
    if q is None or sigma is None:
        raise ValueError("q and sigma are required to compose")
    phases = list(ledger.phases)
    if phases and tuple(phases[-1][:2]) == (q, sigma):
        phases[-1] = (q, sigma, phases[-1][2] + steps)
    else:
        phases.append((q, sigma, steps))
    same = ledger.steps == 0 or (ledger.q, ledger.sigma) == (q, sigma)
    alpha = ledger.alpha + steps * log_moments(q, sigma, ledger.lambdas)
    return PrivacyLedger(q if same else None, sigma if same else None, ledger.lambdas, alpha,
                         ledger.steps + steps, phases)


def epsilon_for_delta(ledger: PrivacyLedger, delta: float) -> PrivacySpend:
    """Smallest eps with delta >= min_lam exp(alpha(lam) - lam * eps)."""
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta {delta} outside (0, 1)")
    lambdas = np.asarray(ledger.lambdas, dtype=float)
    with np.errstate(invalid="ignore"):
        eps = (ledger.alpha - math.log(delta)) / lambdas
    if not np.any(np.isfinite(eps)):
        return PrivacySpend(math.inf, delta, None)
    i = int(np.nanargmin(eps))
    return PrivacySpend(float(eps[i]), delta, int(ledger.lambdas[i]))


def steps_per_epoch(n_records: int, batch_size: int) -> int:
    return max(1, int(round(n_records / batch_size)))


def training_ledger(n_records: int, batch_size: int, sigma: float, epochs: int,
                    lambdas=DEFAULT_LAMBDAS) -> PrivacyLedger:
    q = min(1.0, batch_size / n_records)
    return compose(PrivacyLedger(q, sigma, tuple(lambdas)), epochs * steps_per_epoch(n_records, batch_size))
