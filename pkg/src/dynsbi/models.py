"""Forward simulators for the Ricker map, the vole-weasel SDE, an exponential
toy and a linear-Gaussian state space model.

Batch simulators take an ``(n, k)`` array of parameter rows and return an
``(n, T)`` array of observations; rows whose latent path became non-finite
are filled with NaN so callers can drop them.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import astuple, dataclass, field, fields

import numpy as np
from numba import njit
from scipy.special import gammaln

from .rng import SeedLike, as_rng, seed_record

EPS = 1e-6
DEFAULT_DT = 0.01
DEFAULT_WARMUP = 10.0


class SimulationError(RuntimeError):
    """A simulated path became non-finite."""

    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (step {step})")
        self.step = step


# ---------------------------------------------------------------------------
# parameter containers


class _Params:
    @classmethod
    def names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))

    def to_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=float)

    @classmethod
    def from_array(cls, values):
        return cls(*(float(v) for v in values))

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.names(), astuple(self)))


@dataclass(frozen=True)
class RickerParams(_Params):
    log_r: float
    sigma2: float
    phi: float

    def __post_init__(self):
        if not self.sigma2 >= 0:
            raise ValueError(f"sigma2 must be >= 0, got {self.sigma2}")
        if not self.phi > 0:
            raise ValueError(f"phi must be > 0, got {self.phi}")


@dataclass(frozen=True)
class VoleParams(_Params):
    """Dimensionless vole-weasel parameters."""

    r: float
    e: float
    g: float
    h: float
    a: float
    d: float
    s: float
    sigma: float
    phi: float

    def __post_init__(self):
        for name in ("r", "h", "a", "d", "s", "sigma", "phi"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0, got {getattr(self, name)}")
        if not self.g >= 0:
            raise ValueError(f"g must be >= 0, got {self.g}")
        if not math.isfinite(self.e):
            raise ValueError("e must be finite")


@dataclass(frozen=True)
class DimensionalVoleParams(_Params):
    r: float
    e: float
    s: float
    K: float
    G: float
    H: float
    C: float
    D: float
    Q: float
    Phi: float
    sigma: float

    def __post_init__(self):
        for name in ("r", "s", "K", "G", "H", "C", "D", "Q", "Phi", "sigma"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0, got {getattr(self, name)}")


@dataclass(frozen=True)
class LgSsmParams(_Params):
    a_coef: float
    c_coef: float
    q_var: float
    r_var: float
    m0: float = 0.0
    p0: float = 1.0

    def __post_init__(self):
        for name in ("q_var", "r_var", "p0"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0, got {getattr(self, name)}")


# simulation-study truth
VOLE_TRUTH = VoleParams(r=4.5, e=0.8, g=0.2, h=0.15, a=8.0, d=0.06, s=1.0, sigma=1.5, phi=100.0)
RICKER_TRUTH = RickerParams(log_r=3.8, sigma2=0.3, phi=10.0)


def rescale_dimensional(p: DimensionalVoleParams) -> VoleParams:
    """Map dimensional parameters to the dimensionless form (divide by K)."""
    if not p.K > 0:
        raise ValueError("K must be > 0")
    K = p.K
    return VoleParams(r=p.r, e=p.e, g=p.G / K, h=p.H / K, a=p.C / K, d=p.D / K,
                      s=p.s, sigma=p.sigma, phi=p.Phi * K)


def to_dimensional(p: VoleParams, K: float, Q: float) -> DimensionalVoleParams:
    """Inverse of :func:`rescale_dimensional` for given K and Q."""
    if not K > 0:
        raise ValueError("K must be > 0")
    return DimensionalVoleParams(r=p.r, e=p.e, s=p.s, K=K, G=p.g * K, H=p.h * K,
                                 C=p.a * K, D=p.d * K, Q=Q, Phi=p.phi / K, sigma=p.sigma)


# ---------------------------------------------------------------------------
# trajectories


@dataclass
class Trajectory:
    times: np.ndarray
    latent: np.ndarray  # (T, k)
    obs: np.ndarray  # (T,) integer counts, or reals for the Gaussian model
    latent_names: tuple[str, ...] = ("n",)
    seed: object = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.latent = np.asarray(self.latent, dtype=float).reshape(len(self.times), -1)
        self.obs = np.asarray(self.obs)
        if len(self.obs) != len(self.times):
            raise ValueError("obs and times must have equal length")
        if len(self.times) > 1 and not np.all(np.diff(self.times) > 0):
            raise ValueError("times must be strictly increasing")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["time", *self.latent_names, "obs"])
        for t, row, y in zip(self.times, self.latent, self.obs):
            w.writerow([repr(float(t)), *(repr(float(v)) for v in row), _fmt_obs(y)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "Trajectory":
        rows = list(csv.reader(io.StringIO(text)))
        header, body = rows[0], rows[1:]
        if header[0] != "time" or header[-1] != "obs":
            raise ValueError("trajectory CSV needs columns time,...,obs")
        arr = np.array([[float(v) for v in r] for r in body], dtype=float)
        obs = arr[:, -1]
        if np.all(obs == np.round(obs)):
            obs = obs.astype(np.int64)
        return cls(arr[:, 0], arr[:, 1:-1], obs, tuple(header[1:-1]))


def _fmt_obs(y) -> str:
    return str(int(y)) if float(y).is_integer() else repr(float(y))


# ---------------------------------------------------------------------------
# Ricker map


def ricker_simulate(params: RickerParams, T: int, n0: float = 1.0, seed: SeedLike = 0) -> Trajectory:
    """Simulate ``N_t = r N_{t-1} exp(-N_{t-1} + Z_t)``, ``Y_t ~ Pois(phi N_t)``."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if n0 < 0:
        raise ValueError("n0 must be >= 0")
    rng = as_rng(seed)
    with np.errstate(over="ignore"):
        r = float(np.exp(params.log_r))
    sd = math.sqrt(params.sigma2)
    z = rng.standard_normal(T) * sd
    n = np.empty(T)
    prev = float(n0)
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(T):
            prev = r * prev * math.exp(-prev + z[t])
            if not math.isfinite(prev):
                raise SimulationError("Ricker state overflowed", t + 1)
            n[t] = prev
    y = rng.poisson(params.phi * n)
    return Trajectory(np.arange(1, T + 1, dtype=float), n[:, None], y, ("N",), seed_record(seed))


def ricker_simulate_batch(thetas: np.ndarray, T: int, rng: np.random.Generator, n0: float = 1.0) -> np.ndarray:
    """Vectorised Ricker simulation; ``thetas`` rows are (log_r, sigma2, phi)."""
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    m = thetas.shape[0]
    with np.errstate(over="ignore"):
        r = np.exp(thetas[:, 0])
    sd = np.sqrt(np.maximum(thetas[:, 1], 0.0))
    z = rng.standard_normal((T, m)) * sd
    n = np.full(m, float(n0))
    path = np.empty((T, m))
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(T):
            n = r * n * np.exp(-n + z[t])
            path[t] = n
    ok = np.all(np.isfinite(path), axis=0)
    lam = thetas[:, 2] * np.where(np.isfinite(path), path, 0.0)
    y = rng.poisson(lam).T.astype(float)
    y[~ok] = np.nan
    return y


# ---------------------------------------------------------------------------
# exponential toy


def exponential_simulate(alpha: float, N: int, seed: SeedLike = 0) -> np.ndarray:
    if not alpha > 0:
        raise ValueError("alpha must be > 0")
    if N < 1:
        raise ValueError("N must be >= 1")
    return as_rng(seed).exponential(1.0 / alpha, size=N)


# ---------------------------------------------------------------------------
# vole-weasel SDE


def default_obs_times(first_year: int = 1952, last_year: int = 1996,
                      spring: float = 0.45, autumn: float = 0.70) -> np.ndarray:
    """Spring and autumn trapping times; 90 points for 1952-1996."""
    years = np.arange(first_year, last_year + 1, dtype=float)
    return np.column_stack([years + spring, years + autumn]).ravel()


@njit(cache=True, nogil=True)
def _vole_em(n, p, pars, season, dt, xi, eps):
    """Euler-Maruyama over ``len(season)`` steps, updating ``n``/``p`` in place.

    ``xi`` holds standard normals ``(m, steps)``; a zero-column array means no
    diffusion. Returns the number of clamping events.
    """
    m = n.shape[0]
    nsteps = season.shape[0]
    noisy = xi.shape[1] > 0
    sqdt = math.sqrt(dt)
    clamped = 0
    for i in range(m):
        r = pars[i, 0]
        e = pars[i, 1]
        g = pars[i, 2]
        h2 = pars[i, 3] * pars[i, 3]
        a = pars[i, 4]
        d = pars[i, 5]
        s = pars[i, 6]
        sig = pars[i, 7]
        ni = n[i]
        pi = p[i]
        for k in range(nsteps):
            f = 1.0 - e * season[k]
            n2 = ni * ni
            dn = r * f * ni - r * n2 - g * n2 / (n2 + h2) - a * ni * pi / (ni + d)
            dp = s * f * pi - s * pi * pi / ni
            nn = ni + dn * dt
            if noisy:
                nn += ni * sig * sqdt * xi[i, k]
            pn = pi + dp * dt
            if nn < eps:
                nn = eps
                clamped += 1
            if pn < eps:
                pn = eps
                clamped += 1
            ni = nn
            pi = pn
            if not (math.isfinite(ni) and math.isfinite(pi)):
                ni = math.nan
                pi = math.nan
                break
        n[i] = ni
        p[i] = pi
    return clamped


def _step_grid(t_start: float, times: np.ndarray, dt: float) -> np.ndarray:
    """Integer step indices of ``times`` on the grid ``t_start + k*dt``."""
    k = (np.asarray(times, dtype=float) - t_start) / dt
    ki = np.rint(k)
    if np.any(np.abs(k - ki) > 1e-6):
        raise ValueError("dt must divide the gaps between observation times")
    return ki.astype(np.int64)


def _season(t_start: float, dt: float, k0: int, k1: int) -> np.ndarray:
    return np.sin(2.0 * np.pi * (t_start + np.arange(k0, k1) * dt))


def _check_obs_times(obs_times, dt):
    obs_times = np.asarray(obs_times, dtype=float)
    if obs_times.ndim != 1 or obs_times.size == 0:
        raise ValueError("obs_times must be a non-empty vector")
    if not dt > 0:
        raise ValueError("dt must be > 0")
    if obs_times.size > 1 and not np.all(np.diff(obs_times) > 0):
        raise ValueError("obs_times must be increasing")
    return obs_times


def _integrate_to_obs(n, p, pars, obs_times, dt, warmup, xi=None):
    """Integrate a batch to each observation time; return prey states (m, T)."""
    t_start = obs_times[0] - warmup
    ks = _step_grid(t_start, obs_times, dt)
    m = n.shape[0]
    out = np.empty((m, len(obs_times)))
    preds = np.empty((m, len(obs_times)))
    k_prev = 0
    clamped = 0
    empty = np.empty((m, 0))
    for j, k in enumerate(ks):
        season = _season(t_start, dt, k_prev, k)
        noise = empty if xi is None else np.ascontiguousarray(xi[:, k_prev:k])
        clamped += _vole_em(n, p, pars, season, dt, noise, EPS)
        out[:, j] = n
        preds[:, j] = p
        k_prev = k
    return out, preds, clamped


def vole_simulate(params: VoleParams, obs_times=None, dt: float = DEFAULT_DT,
                  warmup: float = DEFAULT_WARMUP, init: tuple[float, float] = (0.5, 0.1),
                  seed: SeedLike = 0, noise: np.ndarray | None = None) -> Trajectory:
    """Simulate the dimensionless vole-weasel SDE with Poisson trapping counts.

    ``noise`` overrides the standard-normal increments (one per Euler step from
    ``obs_times[0] - warmup``); pass zeros to switch the diffusion off.
    """
    obs_times = _check_obs_times(default_obs_times() if obs_times is None else obs_times, dt)
    if warmup < 0:
        raise ValueError("warmup must be >= 0")
    n0, p0 = init
    if not (n0 > 0 and p0 > 0):
        raise ValueError("initial states must be > 0")
    rng = as_rng(seed)
    t_start = obs_times[0] - warmup
    nsteps = int(_step_grid(t_start, obs_times[-1:], dt)[0])
    xi = rng.standard_normal((1, nsteps)) if noise is None else np.asarray(noise, float).reshape(1, nsteps)
    n = np.array([float(n0)])
    p = np.array([float(p0)])
    pars = params.to_array()[None, :]
    prey, pred, clamped = _integrate_to_obs(n, p, pars, obs_times, dt, warmup, xi)
    if not np.all(np.isfinite(prey)):
        bad = int(np.argmin(np.isfinite(prey[0])))
        raise SimulationError("vole state became non-finite", bad)
    y = rng.poisson(params.phi * prey[0])
    latent = np.column_stack([prey[0], pred[0]])
    return Trajectory(obs_times, latent, y, ("n", "p"), seed_record(seed), {"clamped": int(clamped)})


@dataclass
class SkeletonPath:
    times: np.ndarray
    states: np.ndarray  # (len(times), 2)
    clamped: bool


def vole_skeleton(params: VoleParams, t0: float, horizon: float, dt: float = DEFAULT_DT,
                  init: tuple[float, float] = (0.5, 0.1)) -> SkeletonPath:
    """Noise-free Euler integration of the reduced system on ``t0 + k*dt``."""
    if horizon < 0:
        raise ValueError("horizon must be >= 0")
    if not dt > 0:
        raise ValueError("dt must be > 0")
    nsteps = int(round(horizon / dt))
    states = np.empty((nsteps + 1, 2))
    states[0] = init
    n = np.array([float(init[0])])
    p = np.array([float(init[1])])
    pars = params.to_array()[None, :]
    season = _season(t0, dt, 0, nsteps)
    empty = np.empty((1, 0))
    clamped = 0
    # one step per call keeps the whole path; the kernel is cheap to enter
    for k in range(nsteps):
        clamped += _vole_em(n, p, pars, season[k:k + 1], dt, empty, EPS)
        states[k + 1, 0] = n[0]
        states[k + 1, 1] = p[0]
    return SkeletonPath(t0 + np.arange(nsteps + 1) * dt, states, clamped > 0)


def vole_initial_states(m: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Default initial-state draws, n0 and p0 i.i.d. Uniform(0.01, 1)."""
    return rng.uniform(0.01, 1.0, m), rng.uniform(0.01, 1.0, m)


def vole_simulate_batch(thetas: np.ndarray, rng: np.random.Generator, obs_times=None,
                        dt: float = DEFAULT_DT, warmup: float = DEFAULT_WARMUP) -> np.ndarray:
    """Simulate one count series per parameter row (r, e, g, h, a, d, s, sigma, phi)."""
    obs_times = _check_obs_times(default_obs_times() if obs_times is None else obs_times, dt)
    thetas = np.ascontiguousarray(np.atleast_2d(thetas), dtype=float)
    m = thetas.shape[0]
    n, p = vole_initial_states(m, rng)
    nsteps = int(_step_grid(obs_times[0] - warmup, obs_times[-1:], dt)[0])
    xi = rng.standard_normal((m, nsteps))
    prey, _, _ = _integrate_to_obs(n, p, thetas, obs_times, dt, warmup, xi)
    ok = np.all(np.isfinite(prey), axis=1)
    lam = thetas[:, 8:9] * np.where(ok[:, None], prey, 0.0)
    y = rng.poisson(lam).astype(float)
    y[~ok] = np.nan
    return y


# ---------------------------------------------------------------------------
# linear-Gaussian model


def lg_ssm_simulate(params: LgSsmParams, T: int, seed: SeedLike = 0) -> Trajectory:
    """x_0 ~ N(m0, p0); x_t = a x_{t-1} + N(0, q); y_t = c x_t + N(0, r)."""
    if T < 1:
        raise ValueError("T must be >= 1")
    rng = as_rng(seed)
    x = rng.normal(params.m0, math.sqrt(params.p0))
    xs = np.empty(T)
    for t in range(T):
        x = params.a_coef * x + rng.normal(0.0, math.sqrt(params.q_var))
        xs[t] = x
    y = params.c_coef * xs + rng.normal(0.0, math.sqrt(params.r_var), T)
    return Trajectory(np.arange(1, T + 1, dtype=float), xs[:, None], y, ("x",), seed_record(seed))


def kalman_loglik(params: LgSsmParams, y) -> float:
    """Exact log p(y_{1:T}) by the prediction/update recursion."""
    y = np.asarray(y, dtype=float)
    a, c, q, r = params.a_coef, params.c_coef, params.q_var, params.r_var
    m, P = params.m0, params.p0
    ll = 0.0
    for yt in y:
        m = a * m
        P = a * a * P + q
        S = c * c * P + r
        resid = yt - c * m
        ll += -0.5 * (math.log(2 * math.pi * S) + resid * resid / S)
        K = P * c / S
        m = m + K * resid
        P = (1.0 - K * c) * P
    return ll


# ---------------------------------------------------------------------------
# state space adapters used by the particle filter and the samplers


def poisson_logpmf(y, lam):
    lam = np.asarray(lam, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = y * np.log(lam) - lam - gammaln(y + 1.0)
    # lam == 0: probability 1 at y == 0, 0 otherwise
    return np.where(lam > 0, out, np.where(y == 0, 0.0, -np.inf))


class VoleModel:
    """The vole-weasel SDE with Poisson trapping, as a state space model.

    Parameter vectors are ordered (r, e, g, h, a, d, s, sigma, phi). The
    filter's first prediction integrates ``warmup`` years from pi(n0).
    """

    names = VoleParams.names()

    def __init__(self, obs_times=None, dt: float = DEFAULT_DT, warmup: float = DEFAULT_WARMUP):
        self.obs_times = _check_obs_times(default_obs_times() if obs_times is None else obs_times, dt)
        self.dt = dt
        self.warmup = warmup
        self.t_start = self.obs_times[0] - warmup
        self._ks = _step_grid(self.t_start, self.obs_times, dt)
        self._season = _season(self.t_start, dt, 0, int(self._ks[-1]))

    def simulate(self, thetas, rng):
        return vole_simulate_batch(thetas, rng, self.obs_times, self.dt, self.warmup)

    def initial(self, theta, m, rng):
        n, p = vole_initial_states(m, rng)
        return np.column_stack([n, p])

    def propagate(self, theta, states, t, rng):
        k0 = 0 if t == 0 else int(self._ks[t - 1])
        k1 = int(self._ks[t])
        m = states.shape[0]
        n = states[:, 0].astype(float, copy=True)
        p = states[:, 1].astype(float, copy=True)
        pars = np.ascontiguousarray(np.broadcast_to(np.asarray(theta, float), (m, 9)))
        xi = rng.standard_normal((m, k1 - k0))
        _vole_em(n, p, pars, self._season[k0:k1], self.dt, xi, EPS)
        return np.column_stack([n, p])

    def log_obs(self, theta, states, y_t):
        n = states[:, 0]
        lw = poisson_logpmf(y_t, theta[8] * np.where(np.isfinite(n), n, 0.0))
        return np.where(np.isfinite(n), lw, -np.inf)


class RickerModel:
    """Stochastic Ricker map with fixed initial state ``n0``."""

    names = RickerParams.names()

    def __init__(self, T: int = 50, n0: float = 1.0):
        self.T = T
        self.n0 = n0

    def simulate(self, thetas, rng):
        return ricker_simulate_batch(thetas, self.T, rng, self.n0)

    def initial(self, theta, m, rng):
        return np.full((m, 1), float(self.n0))

    def propagate(self, theta, states, t, rng):
        n = states[:, 0]
        z = rng.standard_normal(n.shape[0]) * math.sqrt(max(theta[1], 0.0))
        with np.errstate(over="ignore", invalid="ignore"):
            return (math.exp(theta[0]) * n * np.exp(-n + z))[:, None]

    def log_obs(self, theta, states, y_t):
        n = states[:, 0]
        ok = np.isfinite(n)
        return np.where(ok, poisson_logpmf(y_t, theta[2] * np.where(ok, n, 0.0)), -np.inf)


class LinearGaussianModel:
    """Linear-Gaussian SSM; ``free`` names the fields carried by theta."""

    def __init__(self, base: LgSsmParams, free: tuple[str, ...] = ("a_coef", "c_coef", "q_var", "r_var", "m0", "p0")):
        unknown = set(free) - set(LgSsmParams.names())
        if unknown:
            raise ValueError(f"unknown parameters {sorted(unknown)}")
        self.base = base
        self.free = tuple(free)
        self.names = self.free

    def params(self, theta) -> LgSsmParams:
        d = self.base.as_dict()
        d.update({k: float(v) for k, v in zip(self.free, theta)})
        return LgSsmParams(**d)

    def loglik(self, theta, y) -> float:
        return kalman_loglik(self.params(theta), y)

    def initial(self, theta, m, rng):
        p = self.params(theta)
        return rng.normal(p.m0, math.sqrt(p.p0), (m, 1))

    def propagate(self, theta, states, t, rng):
        p = self.params(theta)
        return p.a_coef * states + rng.normal(0.0, math.sqrt(p.q_var), states.shape)

    def log_obs(self, theta, states, y_t):
        p = self.params(theta)
        resid = y_t - p.c_coef * states[:, 0]
        return -0.5 * (math.log(2 * math.pi * p.r_var) + resid * resid / p.r_var)
