"""Bootstrap (SIR) particle filter with multinomial resampling at every step.

A model is any object with ``initial(theta, m, rng)``,
``propagate(theta, states, t, rng)`` and ``log_obs(theta, states, y_t)``;
see :mod:`dynsbi.models`.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .rng import SeedLike, as_rng, seed_record, spawn


class DegenerateFilterError(RuntimeError):
    pass


@dataclass
class LogLikEstimate:
    value: float
    method: str
    budget: int
    seed: object = None
    failed_at: int | None = None
    steps: list = field(default_factory=list)  # (t, ess, log_increment)

    def steps_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "ess", "log_increment"])
        for t, ess, inc in self.steps:
            w.writerow([t, repr(float(ess)), repr(float(inc))])
        return buf.getvalue()


def normalize_log_weights(log_w: np.ndarray) -> tuple[np.ndarray, float]:
    """Return normalised weights and log of the mean raw weight."""
    top = np.max(log_w)
    if not np.isfinite(top):
        return np.full(log_w.shape, np.nan), -math.inf
    w = np.exp(log_w - top)
    total = w.sum()
    return w / total, top + math.log(total / log_w.size)


def multinomial_resample(weights, m: int, seed: SeedLike) -> np.ndarray:
    """Draw ``m`` ancestor indices i.i.d. with probabilities ``weights``."""
    w = np.asarray(weights, dtype=float)
    if w.ndim != 1 or np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be a finite non-negative vector")
    total = w.sum()
    if total == 0:
        raise DegenerateFilterError("all particle weights are zero")
    if abs(total - 1.0) > 1e-8:
        raise ValueError(f"weights must be normalised, sum is {total}")
    cdf = np.cumsum(w)
    cdf[-1] = np.inf
    idx = np.searchsorted(cdf, as_rng(seed).random(m), side="right")
    return idx


def sir_loglik(model, theta, y, m: int, seed: SeedLike, record_steps: bool = False) -> LogLikEstimate:
    """SIR estimate of log p(y_{1:T} | theta) with ``m`` particles.

    Returns ``-inf`` (with ``failed_at`` set) if every particle gets zero
    weight at some step.
    """
    if m < 2:
        raise ValueError("need at least 2 particles")
    theta = np.asarray(theta, dtype=float)
    y = np.asarray(y)
    rng = as_rng(seed)
    states = model.initial(theta, m, rng)
    total = 0.0
    steps = []
    for t in range(len(y)):
        states = model.propagate(theta, states, t, rng)
        log_w = model.log_obs(theta, states, y[t])
        w, inc = normalize_log_weights(log_w)
        if not math.isfinite(inc):
            return LogLikEstimate(-math.inf, "SIR", m, seed_record(seed), t, steps)
        total += inc
        if record_steps:
            steps.append((t, 1.0 / np.sum(w * w), inc))
        states = states[multinomial_resample(w, m, rng)]
    return LogLikEstimate(total, "SIR", m, seed_record(seed), None, steps)


def averaged_loglik(model, theta, y, m_total: int, c: int, seed: SeedLike, threads: int = 1) -> LogLikEstimate:
    """Average ``c`` independent SIR likelihoods (natural scale) of ``m_total/c`` particles."""
    if c < 1 or m_total % c:
        raise ValueError("c must divide m_total")
    children = spawn(seed, c)
    m = m_total // c

    def run(ss):
        return sir_loglik(model, theta, y, m, ss).value

    if threads > 1 and c > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            values = list(pool.map(run, children))
    else:
        values = [run(ss) for ss in children]
    values = np.array(values)
    value = float(logsumexp(values) - math.log(c)) if np.isfinite(values).any() else -math.inf
    return LogLikEstimate(value, "SIR", m_total, seed_record(seed))
