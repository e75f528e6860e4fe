"""Independent per-parameter priors."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln


@dataclass(frozen=True)
class Normal:
    mu: float
    sd: float
    lower: float = -math.inf
    upper: float = math.inf

    proper = True

    def logpdf(self, x):
        z = (x - self.mu) / self.sd
        return np.where((x > self.lower) & (x < self.upper),
                        -0.5 * z * z - math.log(self.sd) - 0.5 * math.log(2 * math.pi), -np.inf)

    def sample(self, rng, n):
        out = rng.normal(self.mu, self.sd, n)
        bad = ~((out > self.lower) & (out < self.upper))
        while bad.any():
            out[bad] = rng.normal(self.mu, self.sd, bad.sum())
            bad = ~((out > self.lower) & (out < self.upper))
        return out

    def mean(self):
        return self.mu


@dataclass(frozen=True)
class Exponential:
    rate: float

    proper = True
    lower = 0.0
    upper = math.inf

    def logpdf(self, x):
        return np.where(x > 0, math.log(self.rate) - self.rate * x, -np.inf)

    def sample(self, rng, n):
        return rng.exponential(1.0 / self.rate, n)

    def mean(self):
        return 1.0 / self.rate


@dataclass(frozen=True)
class Gamma:
    shape: float
    scale: float

    proper = True
    lower = 0.0
    upper = math.inf

    def logpdf(self, x):
        with np.errstate(divide="ignore", invalid="ignore"):
            lp = ((self.shape - 1) * np.log(x) - x / self.scale
                  - gammaln(self.shape) - self.shape * math.log(self.scale))
        return np.where(x > 0, lp, -np.inf)

    def sample(self, rng, n):
        return rng.gamma(self.shape, self.scale, n)

    def mean(self):
        return self.shape * self.scale


@dataclass(frozen=True)
class Uniform:
    """Uniform on (lower, upper); an upper bound of inf gives an improper flat prior."""

    lower: float
    upper: float = math.inf

    @property
    def proper(self):
        return math.isfinite(self.lower) and math.isfinite(self.upper)

    def logpdf(self, x):
        val = -math.log(self.upper - self.lower) if self.proper else 0.0
        return np.where((x > self.lower) & (x < self.upper), val, -np.inf)

    def sample(self, rng, n):
        if not self.proper:
            raise ValueError("cannot sample from an improper uniform prior")
        return rng.uniform(self.lower, self.upper, n)

    def mean(self):
        return 0.5 * (self.lower + self.upper) if self.proper else None


_KINDS = {"normal": Normal, "exponential": Exponential, "gamma": Gamma, "uniform": Uniform}


class PriorSpec:
    """Product of independent priors over named parameters."""

    def __init__(self, names, dists):
        if len(names) != len(dists):
            raise ValueError("names and distributions must have equal length")
        self.names = tuple(names)
        self.dists = tuple(dists)

    def __len__(self):
        return len(self.names)

    def logpdf(self, theta) -> float:
        theta = np.asarray(theta, dtype=float)
        return float(sum(float(d.logpdf(v)) for d, v in zip(self.dists, theta)))

    def in_support(self, theta) -> bool:
        return math.isfinite(self.logpdf(theta))

    def logpdf_batch(self, thetas) -> np.ndarray:
        thetas = np.atleast_2d(thetas)
        return sum(d.logpdf(thetas[:, j]) for j, d in enumerate(self.dists))

    def sample(self, rng, n: int) -> np.ndarray:
        return np.column_stack([d.sample(rng, n) for d in self.dists])

    def default_init(self) -> np.ndarray:
        """Prior means where proper (and inside the support), 1.0 otherwise."""
        out = []
        for d in self.dists:
            mu = d.mean()
            ok = mu is not None and math.isfinite(float(d.logpdf(mu)))
            out.append(mu if ok else 1.0)
        return np.array(out, dtype=float)

    def to_dict(self) -> dict:
        rows = {}
        for name, d in zip(self.names, self.dists):
            kind = next(k for k, cls in _KINDS.items() if isinstance(d, cls))
            # infinite bounds go out as strings so the JSON stays standard
            rows[name] = {"dist": kind, **{k: (v if math.isfinite(v) else str(v)) for k, v in d.__dict__.items()}}
        return rows

    @classmethod
    def from_dict(cls, spec: dict) -> "PriorSpec":
        names, dists = [], []
        for name, row in spec.items():
            row = dict(row)
            kind = row.pop("dist")
            if kind not in _KINDS:
                raise ValueError(f"unknown prior kind {kind!r}")
            names.append(name)
            dists.append(_KINDS[kind](**{k: float(v) for k, v in row.items()}))
        return cls(names, dists)


def vole_prior() -> PriorSpec:
    """Priors for (r, e, g, h, a, d, s, sigma, phi).

    The Gamma prior on h has shape 4 and rate 40 (scale 1/40).
    """
    inf = math.inf
    return PriorSpec(
        ("r", "e", "g", "h", "a", "d", "s", "sigma", "phi"),
        (
            Normal(5.0, 1.0, 0.0, inf),
            Normal(1.0, 1.0),
            Exponential(7.0),
            Gamma(4.0, 1.0 / 40.0),
            Normal(15.0, 15.0, 0.0, inf),
            Normal(0.04, 0.04, 0.0, inf),
            Normal(1.25, 0.5, 0.0, inf),
            Uniform(0.5),
            Uniform(0.0),
        ),
    )


def ricker_prior() -> PriorSpec:
    """Proper priors for (log_r, sigma2, phi) used by the ABC experiments."""
    return PriorSpec(("log_r", "sigma2", "phi"),
                     (Uniform(2.0, 5.0), Uniform(0.0, 1.0), Uniform(4.0, 20.0)))
