import math

import numpy as np
import pytest
from scipy import stats as sps

from dynsbi.priors import Exponential, Gamma, Normal, PriorSpec, Uniform, ricker_prior, vole_prior
from dynsbi.rng import as_rng


def test_normal_logpdf_matches_scipy():
    d = Normal(15.0, 15.0, lower=0.0)
    x = np.array([0.5, 8.0, 40.0])
    # density up to the truncation constant, which MH does not need
    np.testing.assert_allclose(d.logpdf(x), sps.norm(15, 15).logpdf(x), rtol=1e-12)
    assert d.logpdf(-1.0) == -np.inf


def test_exponential_and_gamma_match_scipy():
    x = np.array([0.01, 0.2, 1.5])
    np.testing.assert_allclose(Exponential(7.0).logpdf(x), sps.expon(scale=1 / 7).logpdf(x), rtol=1e-12)
    np.testing.assert_allclose(Gamma(4.0, 1 / 40).logpdf(x), sps.gamma(4, scale=1 / 40).logpdf(x), rtol=1e-12)
    assert Gamma(4.0, 1 / 40).logpdf(0.0) == -np.inf


def test_uniform_improper():
    u = Uniform(0.5)
    assert not u.proper and u.mean() is None
    assert u.logpdf(3.0) == 0.0 and u.logpdf(0.4) == -np.inf
    with pytest.raises(ValueError):
        u.sample(as_rng(0), 3)


def test_vole_prior_table():
    p = vole_prior()
    assert p.names == ("r", "e", "g", "h", "a", "d", "s", "sigma", "phi")
    # the weasel handling time has prior mean 4/40
    assert p.dists[3].mean() == pytest.approx(0.1)
    assert p.dists[2].mean() == pytest.approx(1 / 7)
    assert math.isfinite(p.logpdf([4.5, 0.8, 0.2, 0.15, 8, 0.06, 1, 1.5, 100]))
    assert p.logpdf([4.5, 0.8, 0.2, 0.15, 8, 0.06, 1, 0.4, 100]) == -math.inf  # sigma below 0.5
    assert p.logpdf([4.5, -3.0, 0.2, 0.15, 8, 0.06, 1, 1.5, 100]) > -math.inf  # e is unrestricted


def test_default_init():
    init = vole_prior().default_init()
    np.testing.assert_allclose(init, [5, 1, 1 / 7, 0.1, 15, 0.04, 1.25, 1.0, 1.0])


def test_prior_sampling_moments():
    p = ricker_prior()
    x = p.sample(as_rng(1), 20_000)
    assert x.shape == (20_000, 3)
    assert np.all(p.logpdf_batch(x) > -np.inf)


def test_prior_dict_roundtrip():
    p = vole_prior()
    q = PriorSpec.from_dict(p.to_dict())
    assert q.names == p.names and q.dists == p.dists


def test_prior_length_mismatch():
    with pytest.raises(ValueError):
        PriorSpec(("a", "b"), (Normal(0, 1),))
