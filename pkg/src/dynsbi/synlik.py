"""Pointwise synthetic likelihood estimation."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .rng import SeedLike, as_rng
from .summaries import SummaryVector

JITTER_LADDER = (1e-8, 1e-7, 1e-6, 1e-5, 1e-4)
MAX_FAILURE_FRACTION = 0.10


class BudgetError(ValueError):
    """Too few simulations to estimate a covariance matrix."""


class SingularCovarianceError(np.linalg.LinAlgError):
    """Covariance stayed singular after the largest jitter."""


@dataclass
class SynlikFit:
    mu_hat: np.ndarray
    sigma_hat: np.ndarray
    m: int
    log_sl: float
    n_failed: int = 0

    def to_json(self) -> str:
        return json.dumps({
            "mu": self.mu_hat.tolist(),
            "sigma": self.sigma_hat.tolist(),
            "m": self.m,
            "n_failed": self.n_failed,
            "log_sl": self.log_sl if math.isfinite(self.log_sl) else None,
        }, indent=2)


def sample_mean_cov(stats) -> tuple[np.ndarray, np.ndarray]:
    """Sample mean and unbiased (1/(M-1)) covariance of the rows of ``stats``."""
    stats = np.asarray(stats, dtype=float)
    if stats.ndim != 2:
        raise ValueError("stats must be an (M, d) matrix")
    M, d = stats.shape
    if M < d + 2:
        raise BudgetError(f"need at least d + 2 = {d + 2} simulations, got {M}")
    mu = stats.mean(axis=0)
    resid = stats - mu
    return mu, resid.T @ resid / (M - 1)


def shrink_to_diagonal(sigma: np.ndarray, weight: float) -> np.ndarray:
    """Linear shrinkage of ``sigma`` toward its diagonal."""
    if not 0.0 <= weight <= 1.0:
        raise ValueError("shrinkage weight must be in [0, 1]")
    if weight == 0.0:
        return sigma
    return (1.0 - weight) * sigma + weight * np.diag(np.diag(sigma))


def cholesky_jittered(sigma: np.ndarray):
    """Cholesky factor of ``sigma``, adding escalating diagonal jitter on failure.

    The jitter is ``delta * trace(sigma) / d`` (``delta`` alone when the trace
    vanishes). Returns ``(factor, jitter)``.
    """
    sigma = np.asarray(sigma, dtype=float)
    if not np.all(np.isfinite(sigma)):
        raise SingularCovarianceError("covariance has non-finite entries")
    try:
        return cho_factor(sigma, lower=True, check_finite=False), 0.0
    except np.linalg.LinAlgError:
        pass
    d = sigma.shape[0]
    scale = np.trace(sigma) / d
    if not scale > 0:
        scale = 1.0
    for delta in JITTER_LADDER:
        jitter = delta * scale
        try:
            return cho_factor(sigma + jitter * np.eye(d), lower=True, check_finite=False), jitter
        except np.linalg.LinAlgError:
            continue
    raise SingularCovarianceError("covariance is singular even after maximum jitter")


def gaussian_logdensity(s, mu, sigma) -> float:
    """Multivariate normal log density via a (jittered) Cholesky factor."""
    s = s.values if isinstance(s, SummaryVector) else np.asarray(s, dtype=float)
    mu = np.asarray(mu, dtype=float)
    d = mu.size
    (c, low), _ = cholesky_jittered(sigma)
    resid = s - mu
    quad = float(resid @ cho_solve((c, low), resid, check_finite=False))
    logdet = 2.0 * float(np.sum(np.log(np.diag(c))))
    return -0.5 * (d * math.log(2 * math.pi) + logdet + quad)


def sl_estimate(simulator, summarizer, theta, s_obs, m: int, seed: SeedLike,
                shrinkage: float = 0.0) -> SynlikFit:
    """Synthetic log-likelihood of ``s_obs`` at ``theta`` from ``m`` simulations.

    ``simulator(thetas, rng)`` returns one dataset per parameter row and
    ``summarizer(datasets)`` maps them to an ``(m, d)`` statistic matrix.
    Non-finite replicates are dropped; if more than 10% fail the estimate is
    ``-inf``. Raises :class:`SingularCovarianceError` if the covariance cannot
    be regularised.
    """
    s_obs = s_obs.values if isinstance(s_obs, SummaryVector) else np.asarray(s_obs, dtype=float)
    d = s_obs.size
    if m < d + 2:
        raise BudgetError(f"need m >= d + 2 = {d + 2}, got {m}")
    rng = as_rng(seed)
    thetas = np.tile(np.asarray(theta, dtype=float), (m, 1))
    stats = np.asarray(summarizer(simulator(thetas, rng)), dtype=float).reshape(m, d)
    good = np.all(np.isfinite(stats), axis=1)
    n_failed = int(m - good.sum())
    nan_fit = SynlikFit(np.full(d, np.nan), np.full((d, d), np.nan), m, -math.inf, n_failed)
    if n_failed > MAX_FAILURE_FRACTION * m or good.sum() < d + 2:
        return nan_fit
    mu, sigma = sample_mean_cov(stats[good])
    sigma = shrink_to_diagonal(sigma, shrinkage)
    return SynlikFit(mu, sigma, m, gaussian_logdensity(s_obs, mu, sigma), n_failed)
