"""Normality checks for simulated statistics, Lyapunov exponents and
estimator comparison tables."""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import stats as sps
from scipy.linalg import cho_solve

from .models import EPS, VoleParams, _vole_em
from .rng import SeedLike, as_rng, spawn
from .summaries import SummaryVector
from .synlik import cholesky_jittered, sample_mean_cov

# ten Euler steps per month
LYAPUNOV_DT = 1.0 / 120.0


# ---------------------------------------------------------------------------
# normality


@dataclass
class NormalityReport:
    chi2_values: np.ndarray  # sorted squared distances of the simulated rows
    theoretical_quantiles: np.ndarray  # chi2(d) quantiles at (i - 0.5)/M
    obs_mahalanobis: float
    marginal_qq: list  # per statistic: (sorted standardised values, normal quantiles)
    names: tuple[str, ...]
    jitter: float = 0.0

    @property
    def qq_slope(self) -> float:
        """OLS slope of the observed against the theoretical chi-square quantiles."""
        return float(np.polyfit(self.theoretical_quantiles, self.chi2_values, 1)[0])

    def qq_csv(self, log_scale: bool = False) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if log_scale:
            w.writerow(["log_theoretical", "log_observed"])
            pairs = zip(np.log(self.theoretical_quantiles), np.log(self.chi2_values))
        else:
            w.writerow(["theoretical", "observed"])
            pairs = zip(self.theoretical_quantiles, self.chi2_values)
        for a, b in pairs:
            w.writerow([repr(float(a)), repr(float(b))])
        return buf.getvalue()

    def marginal_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["statistic", "normal_quantile", "standardised_value"])
        for name, (vals, q) in zip(self.names, self.marginal_qq):
            for a, b in zip(q, vals):
                w.writerow([name, repr(float(a)), repr(float(b))])
        return buf.getvalue()


def krzanowski_report(stats, s_obs) -> NormalityReport:
    """Chi-square and marginal q-q data for simulated statistic rows.

    Each row is mapped to its squared Mahalanobis distance from the sample
    mean under the sample covariance, which is chi2(d) under normality.
    """
    stats = np.asarray(stats, dtype=float)
    stats = stats[np.all(np.isfinite(stats), axis=1)]
    names = s_obs.names if isinstance(s_obs, SummaryVector) else tuple(f"s{i}" for i in range(stats.shape[1]))
    s_obs = s_obs.values if isinstance(s_obs, SummaryVector) else np.asarray(s_obs, dtype=float)
    M, d = stats.shape
    mu, sigma = sample_mean_cov(stats)
    factor, jitter = cholesky_jittered(sigma)
    resid = stats - mu
    chi2 = np.sum(resid * cho_solve(factor, resid.T).T, axis=1)
    probs = (np.arange(1, M + 1) - 0.5) / M
    ro = s_obs - mu
    obs = float(ro @ cho_solve(factor, ro))
    zq = sps.norm.ppf(probs)
    sd = np.sqrt(np.diag(sigma))
    sd = np.where(sd > 0, sd, 1.0)
    marg = [(np.sort(resid[:, j] / sd[j]), zq) for j in range(d)]
    return NormalityReport(np.sort(chi2), sps.chi2.ppf(probs, d), obs, marg, tuple(names), jitter)


# ---------------------------------------------------------------------------
# Lyapunov exponents


@dataclass
class LyapunovResult:
    lambda_max: float  # per time unit of the skeleton (per year for the vole model)
    transient: int
    horizon: int
    unit: str = "year"


class LogisticMap:
    """x -> r x (1 - x); one unit is one iteration."""

    unit = "step"
    units_per_time = 1.0

    def __init__(self, r: float = 4.0):
        self.r = r

    def initial_state(self, rng):
        return np.array([rng.uniform(0.05, 0.95)])

    def advance(self, states, start: int, n: int):
        r = self.r
        out = []
        for x in np.asarray(states, dtype=float).ravel().tolist():
            for _ in range(n):
                x = r * x * (1.0 - x)
            out.append(x)
        return np.array(out).reshape(np.shape(states))


class VoleSkeleton:
    """Noise-free vole dynamics advanced in whole months."""

    unit = "year"
    units_per_time = 12.0  # months per year

    def __init__(self, params: VoleParams, dt: float = LYAPUNOV_DT, t0: float = 0.0):
        self.params = params
        self.per_month = int(round(1.0 / 12.0 / dt))
        if abs(self.per_month * dt - 1.0 / 12.0) > 1e-9:
            raise ValueError("dt must divide one month")
        self.dt = dt
        self.t0 = t0
        self._pars = params.to_array()[None, :]

    def initial_state(self, rng):
        return rng.uniform(0.1, 1.0, 2)

    def advance(self, states, start: int, n: int):
        """Advance one or more (n, p) states by ``n`` months from month ``start``."""
        states = np.atleast_2d(states)
        k0 = start * self.per_month
        season = np.sin(2 * np.pi * (self.t0 + np.arange(k0, k0 + n * self.per_month) * self.dt))
        nn = states[:, 0].astype(float, copy=True)
        pp = states[:, 1].astype(float, copy=True)
        pars = np.repeat(self._pars, len(nn), axis=0)
        _vole_em(nn, pp, pars, season, self.dt, np.empty((len(nn), 0)), EPS)
        return np.column_stack([nn, pp])


def lyapunov_max(skeleton, transient: int, horizon: int, seed: SeedLike, renorm_every: int = 1,
                 delta0: float = 1e-8, x0=None) -> LyapunovResult:
    """Largest Lyapunov exponent by two-trajectory divergence with renormalisation.

    The companion starts ``delta0`` away in a random direction; every
    ``renorm_every`` units the log growth of the separation is accumulated
    and the companion is pulled back to distance ``delta0``.
    """
    if horizon < 1 or renorm_every < 1:
        raise ValueError("horizon and renorm_every must be >= 1")
    rng = as_rng(seed)
    x = np.asarray(skeleton.initial_state(rng) if x0 is None else x0, dtype=float).ravel()
    if transient > 0:
        x = np.asarray(skeleton.advance(x[None, :], 0, transient)).ravel()
    u = rng.standard_normal(x.size)
    y = x + delta0 * u / np.linalg.norm(u)
    total = 0.0
    t = transient
    done = 0
    while done < horizon:
        n = min(renorm_every, horizon - done)
        out = np.asarray(skeleton.advance(np.vstack([x, y]), t, n))
        x, y = out[0], out[1]
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise FloatingPointError(f"trajectory became non-finite at unit {t + n}")
        sep = y - x
        dist = float(np.linalg.norm(sep))
        if dist == 0.0:
            # trajectories merged; the exponent is effectively -inf over this step
            sep = rng.standard_normal(x.size)
            dist = np.finfo(float).tiny
        total += math.log(dist / delta0)
        y = x + delta0 * sep / np.linalg.norm(sep)
        t += n
        done += n
    return LyapunovResult(total / horizon * skeleton.units_per_time, transient, horizon, skeleton.unit)


def vole_lyapunov(params: VoleParams, transient_months: int, horizon_months: int, seed: SeedLike,
                  dt: float = LYAPUNOV_DT, renorm_months: int = 1) -> LyapunovResult:
    """Maximal Lyapunov exponent (per year) of the vole skeleton."""
    return lyapunov_max(VoleSkeleton(params, dt), transient_months, horizon_months, seed, renorm_months)


def lyapunov_posterior(chain, n_draws: int, transient_months: int, horizon_months: int, seed: SeedLike,
                       threads: int = 1, dt: float = LYAPUNOV_DT) -> np.ndarray:
    """Exponents for ``n_draws`` rows sampled from the post-burn-in chain; failures are NaN."""
    post = chain.posterior
    if post.shape[0] < n_draws:
        raise ValueError("chain has fewer post-burn-in rows than requested draws")
    seeds = spawn(seed, n_draws + 1)
    rows = as_rng(seeds[0]).choice(post.shape[0], size=n_draws, replace=False)

    def one(i):
        try:
            params = VoleParams.from_array(post[rows[i]])
            return vole_lyapunov(params, transient_months, horizon_months, seeds[i + 1], dt).lambda_max
        except (FloatingPointError, ValueError):
            return math.nan

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return np.array(list(pool.map(one, range(n_draws))))
    return np.array([one(i) for i in range(n_draws)])


# ---------------------------------------------------------------------------
# estimator comparison


def posterior_summary(chain) -> dict[str, tuple[float, float]]:
    post = chain.posterior
    if post.shape[0] < 2:
        raise ValueError("need at least two post-burn-in draws")
    return {n: (float(m), float(s)) for n, m, s in zip(chain.names, post.mean(axis=0), post.std(axis=0, ddof=1))}


@dataclass
class ComparisonRow:
    name: str
    rmse_a: float
    ratio_a: float
    rmse_b: float
    ratio_b: float
    p_value: float
    mean_log_sq_diff: float

    @property
    def best(self) -> str:
        return "a" if self.rmse_a <= self.rmse_b else "b"


def _error_stats(errors):
    rmse = float(np.sqrt(np.mean(errors ** 2)))
    bias2 = float(np.mean(errors)) ** 2
    var = float(np.var(errors))
    ratio = var / bias2 if bias2 > 0 else (0.0 if var == 0 else math.inf)
    return rmse, ratio


def compare_estimators(truth: dict, chains_a: list, chains_b: list) -> list[ComparisonRow]:
    """RMSE, variance-to-squared-bias ratio and a paired t-test on log squared errors."""
    if len(chains_a) != len(chains_b) or len(chains_a) < 2:
        raise ValueError("need two equal-length lists of at least two chains")
    names = tuple(chains_a[0].names)
    for c in (*chains_a, *chains_b):
        if tuple(c.names) != names:
            raise ValueError("chains have mismatched parameter names")
    if set(truth) - set(names) or set(names) - set(truth):
        raise ValueError("truth and chain parameter names differ")
    mean_a = np.array([c.posterior.mean(axis=0) for c in chains_a])
    mean_b = np.array([c.posterior.mean(axis=0) for c in chains_b])
    rows = []
    for j, name in enumerate(names):
        ea = mean_a[:, j] - truth[name]
        eb = mean_b[:, j] - truth[name]
        ra, qa = _error_stats(ea)
        rb, qb = _error_stats(eb)
        with np.errstate(divide="ignore"):
            diff = np.log(ea ** 2) - np.log(eb ** 2)
        if np.all(diff == 0) or not np.all(np.isfinite(diff)):
            p = 1.0 if np.all(diff == 0) else math.nan
        else:
            p = float(sps.ttest_rel(np.log(ea ** 2), np.log(eb ** 2)).pvalue)
            if math.isnan(p):
                p = 1.0
        rows.append(ComparisonRow(name, ra, qa, rb, qb, p, float(np.mean(diff)) if np.all(np.isfinite(diff)) else math.nan))
    return rows


def comparison_csv(rows: list[ComparisonRow], label_a: str = "a", label_b: str = "b") -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["parameter", f"rmse_{label_a}", f"ratio_{label_a}", f"rmse_{label_b}", f"ratio_{label_b}", "p_value", "best"])
    for r in rows:
        w.writerow([r.name, repr(r.rmse_a), repr(r.ratio_a), repr(r.rmse_b), repr(r.ratio_b), repr(r.p_value),
                    label_a if r.best == "a" else label_b])
    return buf.getvalue()
