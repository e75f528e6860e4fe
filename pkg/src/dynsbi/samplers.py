"""Metropolis-Hastings with noisy plug-in likelihoods, ABC rejection and SMC-ABC."""

from __future__ import annotations

import csv
import io
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve
from scipy.special import logsumexp

from .models import RICKER_TRUTH, RickerModel
from .pfilter import averaged_loglik
from .priors import PriorSpec, ricker_prior
from .rng import SeedLike, as_rng, seed_record, spawn
from .summaries import check_scaling_matrix, mahalanobis_sq, ricker_stats
from .synlik import SingularCovarianceError, cholesky_jittered, sample_mean_cov, sl_estimate

log = logging.getLogger(__name__)


class InitializationError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Metropolis-Hastings


@dataclass
class ProposalSpec:
    """Independent Gaussian random-walk steps on a per-parameter scale."""

    transforms: tuple[str, ...]
    steps: np.ndarray

    def __post_init__(self):
        self.steps = np.asarray(self.steps, dtype=float)
        if any(t not in ("identity", "log") for t in self.transforms):
            raise ValueError("transforms must be 'identity' or 'log'")
        if self.steps.shape != (len(self.transforms),) or np.any(self.steps < 0):
            raise ValueError("need one non-negative step size per parameter")
        self._log = np.array([t == "log" for t in self.transforms])

    @classmethod
    def for_prior(cls, prior: PriorSpec, steps) -> "ProposalSpec":
        """Log scale for parameters whose support is bounded below by >= 0."""
        transforms = tuple("log" if getattr(d, "lower", -math.inf) >= 0 else "identity" for d in prior.dists)
        return cls(transforms, np.broadcast_to(np.asarray(steps, float), (len(prior),)).copy())

    def forward(self, theta):
        theta = np.asarray(theta, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self._log, np.log(theta), theta)

    def inverse(self, z):
        return np.where(self._log, np.exp(z), z)

    def log_jacobian(self, z) -> float:
        """log |d theta / d z|."""
        return float(np.sum(np.where(self._log, z, 0.0)))


@dataclass
class Chain:
    names: tuple[str, ...]
    draws: np.ndarray
    loglik: np.ndarray
    accepted: np.ndarray
    burn_in: int
    seed: object = None
    steps: np.ndarray | None = None

    @property
    def posterior(self) -> np.ndarray:
        return self.draws[self.burn_in:]

    @property
    def acceptance_rate(self) -> float:
        acc = self.accepted[self.burn_in:]
        return float(acc.mean()) if acc.size else float("nan")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iter", *self.names, "loglik", "accepted", "burn_in"])
        for i, (row, ll, acc) in enumerate(zip(self.draws, self.loglik, self.accepted)):
            w.writerow([i, *(repr(float(v)) for v in row), repr(float(ll)), int(acc), int(i < self.burn_in)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "Chain":
        rows = list(csv.reader(io.StringIO(text)))
        header = rows[0]
        names = tuple(header[1:-3])
        arr = np.array([[float(v) for v in r] for r in rows[1:]])
        return cls(names, arr[:, 1:-3], arr[:, -3], arr[:, -2].astype(bool), int(arr[:, -1].sum()))


def log_accept_ratio(ll_cur, ll_prop, lp_cur, lp_prop, lj_cur, lj_prop) -> float:
    """log of the MH ratio for a symmetric walk on the transformed scale."""
    with np.errstate(invalid="ignore"):
        val = (ll_prop - ll_cur) + (lp_prop - lp_cur) + (lj_prop - lj_cur)
    return -math.inf if math.isnan(val) else float(val)


def mh_chain(loglik, prior: PriorSpec, proposal: ProposalSpec, init, n_iter: int, burn_in: int,
             seed: SeedLike, refresh_current: bool | str = False, adapt: bool = True,
             target=(0.15, 0.30), window: int = 50, progress=None) -> Chain:
    """Random-walk Metropolis-Hastings with a (possibly noisy) log-likelihood.

    ``loglik(theta, rng)`` returns a log-likelihood estimate. Step sizes are
    tuned during burn-in toward the ``target`` acceptance band and frozen
    afterwards. With ``refresh_current=True`` the current point's likelihood
    is re-estimated at every iteration; with ``"burn-in"`` only during burn-in,
    which frees a noisy chain stuck on a lucky estimate while keeping the
    retained draws exact pseudo-marginal.
    """
    if refresh_current not in (True, False, "burn-in"):
        raise ValueError("refresh_current must be True, False or 'burn-in'")
    if not n_iter > burn_in >= 0:
        raise ValueError("need n_iter > burn_in >= 0")
    rng = as_rng(seed)
    theta = np.asarray(init, dtype=float).copy()
    if not prior.in_support(theta):
        raise ValueError(f"initial value {theta} is outside the prior support")
    k = theta.size
    z = proposal.forward(theta)
    lp = prior.logpdf(theta)
    lj = proposal.log_jacobian(z)
    ll = float(loglik(theta, rng))
    if not math.isfinite(ll):
        raise InitializationError("log-likelihood is not finite at the initial value")

    shape = proposal.steps.copy()
    scale = 1.0
    draws = np.empty((n_iter, k))
    lls = np.empty(n_iter)
    accepted = np.zeros(n_iter, dtype=bool)
    for i in range(n_iter):
        if refresh_current is True or (refresh_current == "burn-in" and i < burn_in):
            ll = float(loglik(theta, rng))
        z_prop = z + scale * shape * rng.standard_normal(k)
        theta_prop = proposal.inverse(z_prop)
        lp_prop = prior.logpdf(theta_prop)
        log_u = math.log(rng.random())
        if math.isfinite(lp_prop):
            ll_prop = float(loglik(theta_prop, rng))
            lj_prop = proposal.log_jacobian(z_prop)
            if log_u < log_accept_ratio(ll, ll_prop, lp, lp_prop, lj, lj_prop):
                theta, z, ll, lp, lj = theta_prop, z_prop, ll_prop, lp_prop, lj_prop
                accepted[i] = True
        draws[i] = theta
        lls[i] = ll
        if adapt and i < burn_in and (i + 1) % window == 0:
            rate = accepted[i + 1 - window:i + 1].mean()
            if rate < target[0]:
                scale *= 0.7
            elif rate > target[1]:
                scale *= 1.3
            if i + 1 >= 4 * window:
                # match component steps to the spread over the latter half of burn-in so far
                sd = proposal.forward(draws[(i + 1) // 2:i + 1]).std(axis=0)
                if np.any(sd > 0):
                    if i + 1 == 4 * window:
                        scale = 1.0  # the new shape already carries the overall size
                    shape = np.where(sd > 0, 2.38 / math.sqrt(k) * sd, shape)
        if progress is not None:
            progress(i, theta, ll)
    return Chain(tuple(prior.names), draws, lls, accepted, burn_in, seed_record(seed), scale * shape)


def _sl_plugin(simulator, summarizer, s_obs, m, shrinkage):
    def loglik(theta, rng):
        try:
            return sl_estimate(simulator, summarizer, theta, s_obs, m, rng, shrinkage).log_sl
        except SingularCovarianceError:
            return -math.inf
    return loglik


def slmh(simulator, summarizer, s_obs, prior: PriorSpec, proposal: ProposalSpec, init, n_iter: int,
         burn_in: int, m: int, seed: SeedLike, refresh_current: bool | str = False, shrinkage: float = 0.0,
         **kw) -> Chain:
    """MH with the synthetic likelihood as plug-in."""
    return mh_chain(_sl_plugin(simulator, summarizer, s_obs, m, shrinkage), prior, proposal, init,
                    n_iter, burn_in, seed, refresh_current=refresh_current, **kw)


def pmmh(model, y, prior: PriorSpec, proposal: ProposalSpec, init, n_iter: int, burn_in: int,
         m: int, seed: SeedLike, replicates: int = 1, threads: int = 1,
         refresh_current: bool | str = False, **kw) -> Chain:
    """Particle marginal MH; ``replicates`` filters of ``m/replicates`` particles are averaged."""
    def loglik(theta, rng):
        return averaged_loglik(model, theta, y, m, replicates, rng, threads).value
    return mh_chain(loglik, prior, proposal, init, n_iter, burn_in, seed, refresh_current=refresh_current, **kw)


# ---------------------------------------------------------------------------
# ABC


@dataclass
class AbcRejectionResult:
    accepted: np.ndarray
    distances: np.ndarray
    n_total: int
    empty: bool


def abc_rejection(prior: PriorSpec, simulator, summarizer, s_obs, m_total: int, h: float, a,
                  seed: SeedLike) -> AbcRejectionResult:
    """Keep the prior draws whose simulated statistics lie within ``h`` of ``s_obs``."""
    if not h >= 0:
        raise ValueError("tolerance must be non-negative")
    a = check_scaling_matrix(a)
    rng = as_rng(seed)
    thetas = prior.sample(rng, m_total)
    stats = summarizer(simulator(thetas, rng))
    dist = np.asarray(mahalanobis_sq(s_obs, stats, a), dtype=float).reshape(m_total)
    keep = dist < h  # NaN distances from failed simulations are never kept
    if not keep.any():
        warnings.warn("ABC rejection accepted no parameters", RuntimeWarning, stacklevel=2)
    return AbcRejectionResult(thetas[keep], dist[keep], m_total, not keep.any())


@dataclass
class AbcPopulation:
    particles: np.ndarray
    weights: np.ndarray
    tolerance: float
    acceptance_ratio: float
    distances: np.ndarray
    n_sims: int


@dataclass
class SmcAbcResult:
    populations: list[AbcPopulation]
    truncated: bool = False
    names: tuple[str, ...] = ()

    @property
    def tolerances(self) -> list[float]:
        return [p.tolerance for p in self.populations]

    @property
    def final_tolerance(self) -> float:
        return self.populations[-1].tolerance

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["round", "tolerance", *self.names, "weight", "distance"])
        for r, pop in enumerate(self.populations):
            for th, wt, d in zip(pop.particles, pop.weights, pop.distances):
                w.writerow([r, repr(float(pop.tolerance)), *(repr(float(v)) for v in th),
                            repr(float(wt)), repr(float(d))])
        return buf.getvalue()


def _kernel_logpdf(x, centres, var):
    diff = x[:, None, :] - centres[None, :, :]
    return -0.5 * np.sum(diff * diff / var + np.log(2 * np.pi * var), axis=2)


def smc_abc(prior: PriorSpec, simulator, summarizer, s_obs, n_pop: int, a, stop_accept_ratio: float,
            seed: SeedLike, max_rounds: int = 100, max_sims_per_round: int = 1_000_000,
            batch_cap: int = 20_000) -> SmcAbcResult:
    """Sequential ABC with shrinking tolerances.

    Round 0 samples the prior (tolerance inf). Each later round sets the
    tolerance to the median distance of the previous population, perturbs
    resampled particles with a Gaussian kernel of twice the weighted
    variance, and reweights by prior over kernel mixture. Stops once a round's
    acceptance ratio falls below ``stop_accept_ratio``.
    """
    if n_pop < 2:
        raise ValueError("population size must be at least 2")
    if not 0 < stop_accept_ratio <= 1:
        raise ValueError("stop_accept_ratio must be in (0, 1]")
    a = check_scaling_matrix(a)
    rng = as_rng(seed)
    k = len(prior)

    def distances(thetas):
        stats = summarizer(simulator(thetas, rng))
        return np.asarray(mahalanobis_sq(s_obs, stats, a), dtype=float).reshape(len(thetas))

    # round 0: prior draws, keep the first n_pop with finite distance
    parts, dists, n_sims = [], [], 0
    while sum(len(p) for p in parts) < n_pop:
        th = prior.sample(rng, n_pop)
        dd = distances(th)
        n_sims += n_pop
        ok = np.isfinite(dd)
        parts.append(th[ok])
        dists.append(dd[ok])
        if n_sims > max_sims_per_round:
            raise RuntimeError("prior simulations keep failing")
    theta = np.concatenate(parts)[:n_pop]
    dist = np.concatenate(dists)[:n_pop]
    weights = np.full(n_pop, 1.0 / n_pop)
    pops = [AbcPopulation(theta, weights, math.inf, n_pop / n_sims, dist, n_sims)]
    truncated = False

    for _ in range(max_rounds):
        h = float(np.median(pops[-1].distances))
        prev = pops[-1]
        mean = weights @ prev.particles
        var = 2.0 * (weights @ (prev.particles - mean) ** 2)
        var = np.maximum(var, 1e-12 * np.maximum(1.0, mean ** 2))
        log_prev_w = np.log(prev.weights)
        acc_theta, acc_dist = [], []
        n_acc, sims = 0, 0
        rate_guess = max(prev.acceptance_ratio, 1e-3) * 0.5
        while n_acc < n_pop:
            if sims >= max_sims_per_round:
                truncated = True
                break
            need = n_pop - n_acc
            batch = int(min(batch_cap, max_sims_per_round - sims, max(64, math.ceil(1.2 * need / rate_guess))))
            anc = rng.choice(n_pop, size=batch, p=prev.weights)
            cand = prev.particles[anc] + rng.standard_normal((batch, k)) * np.sqrt(var)
            inside = np.isfinite(prior.logpdf_batch(cand))
            cand = cand[inside]
            if cand.shape[0] == 0:
                continue
            dd = distances(cand)
            hit = np.flatnonzero(dd < h)
            if n_acc + hit.size >= n_pop:
                last = hit[need - 1]
                hit = hit[:need]
                sims += last + 1
            else:
                sims += cand.shape[0]
            acc_theta.append(cand[hit])
            acc_dist.append(dd[hit])
            n_acc += hit.size
            rate_guess = max(n_acc / max(sims, 1), 1e-4)
        if n_acc == 0:
            break
        theta = np.concatenate(acc_theta)
        dist = np.concatenate(acc_dist)
        log_w = prior.logpdf_batch(theta) - logsumexp(log_prev_w[None, :] + _kernel_logpdf(theta, prev.particles, var), axis=1)
        weights = np.exp(log_w - logsumexp(log_w))
        ratio = n_acc / sims
        pops.append(AbcPopulation(theta, weights, h, ratio, dist, sims))
        log.debug("smc-abc round %d: h=%.4g, acceptance %.4f", len(pops) - 1, h, ratio)
        if truncated or ratio < stop_accept_ratio:
            break
    return SmcAbcResult(pops, truncated, tuple(prior.names))


# ---------------------------------------------------------------------------
# scaling-matrix experiment


def scaling_matrix_experiment(grid, reps: int, seed: SeedLike, n_pop: int = 200, stop_accept_ratio: float = 0.01,
                              n_cov: int = 10_000, T: int = 50, truth=RICKER_TRUTH, prior: PriorSpec | None = None,
                              max_sims_per_round: int = 1_000_000) -> list[dict]:
    """Final SMC-ABC tolerance when the scaling matrix is estimated at log r = v.

    For every repetition and grid value: simulate observed Ricker data at
    ``truth``, estimate the statistic covariance from ``n_cov`` simulations
    at (v, sigma2, phi), and run SMC-ABC with its inverse as scaling matrix.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise ValueError("grid must be non-empty")
    prior = ricker_prior() if prior is None else prior
    model = RickerModel(T=T)
    truth_row = np.asarray(truth.to_array() if hasattr(truth, "to_array") else truth, dtype=float)
    rows = []
    seeds = spawn(seed, reps * grid.size)
    for rep in range(reps):
        for j, v in enumerate(grid):
            rng = as_rng(seeds[rep * grid.size + j])
            s_obs = ricker_stats(model.simulate(truth_row[None, :], rng))[0]
            theta_p = truth_row.copy()
            theta_p[0] = v
            stats = ricker_stats(model.simulate(np.tile(theta_p, (n_cov, 1)), rng))
            stats = stats[np.all(np.isfinite(stats), axis=1)]
            _, sigma = sample_mean_cov(stats)
            factor, _ = cholesky_jittered(sigma)
            A = cho_solve(factor, np.eye(sigma.shape[0]))
            A = 0.5 * (A + A.T)
            res = smc_abc(prior, model.simulate, ricker_stats, s_obs, n_pop, A, stop_accept_ratio, rng,
                          max_sims_per_round=max_sims_per_round)
            rows.append({"rep": rep, "v": float(v), "tolerance": res.final_tolerance,
                         "rounds": len(res.populations) - 1, "truncated": res.truncated,
                         "sims": int(sum(p.n_sims for p in res.populations))})
    return rows
