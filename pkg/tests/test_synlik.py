import json
import math

import numpy as np
import pytest
from scipy import stats as sps

from dynsbi.rng import as_rng
from dynsbi.synlik import (JITTER_LADDER, BudgetError, SingularCovarianceError, cholesky_jittered,
                           gaussian_logdensity, sample_mean_cov, shrink_to_diagonal, sl_estimate)


def gauss_sim(thetas, rng):
    return thetas[:, :1] + rng.standard_normal((thetas.shape[0], 1))


def ident(x):
    return x


# --- sample moments -------------------------------------------------------

def test_identical_rows_zero_covariance():
    mu, sigma = sample_mean_cov(np.tile([1.0, 2.0, 3.0], (8, 1)))
    np.testing.assert_array_equal(mu, [1.0, 2.0, 3.0])
    np.testing.assert_array_equal(sigma, np.zeros((3, 3)))


def test_square_corners_hand_values():
    mu, sigma = sample_mean_cov(np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 2.0], [2.0, 2.0]]))
    np.testing.assert_allclose(mu, [1.0, 1.0])
    np.testing.assert_allclose(sigma, 4.0 / 3.0 * np.eye(2), atol=1e-15)


def test_moments_monte_carlo():
    rng = as_rng(1)
    cov = np.array([[2.0, 0.6], [0.6, 1.0]])
    M = 50_000
    x = rng.multivariate_normal([1.0, -1.0], cov, M)
    mu, sigma = sample_mean_cov(x)
    assert np.all(np.abs(mu - [1.0, -1.0]) < 3 * np.sqrt(np.diag(cov) / M))
    # var(S_ij) = (s_ij^2 + s_ii s_jj) / (M - 1)
    se = np.sqrt((cov ** 2 + np.outer(np.diag(cov), np.diag(cov))) / (M - 1))
    assert np.all(np.abs(sigma - cov) < 3 * se)


def test_budget_error():
    with pytest.raises(BudgetError):
        sample_mean_cov(np.zeros((4, 3)))
    with pytest.raises(BudgetError):
        sl_estimate(gauss_sim, ident, [0.0], [0.0], 2, seed=1)


# --- densities ------------------------------------------------------------

def test_logdensity_standard_at_mean():
    assert gaussian_logdensity([0.0], [0.0], np.eye(1)) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-14)
    assert gaussian_logdensity([0.0], [0.0], np.eye(1)) == pytest.approx(-0.91894, abs=1e-5)


def test_logdensity_scalar_formula():
    # offset 1 with variance 4: quadratic term 1/4
    assert gaussian_logdensity([2.0], [1.0], np.array([[4.0]])) == pytest.approx(
        -0.5 * math.log(8 * math.pi) - 0.125, abs=1e-14)


def test_logdensity_dense_oracle():
    rng = as_rng(2)
    d = 5
    a = rng.standard_normal((d, d))
    sigma = a @ a.T + d * np.eye(d)
    mu, s = rng.standard_normal(d), rng.standard_normal(d)
    r = s - mu
    ref = -0.5 * (d * math.log(2 * math.pi) + math.log(np.linalg.det(sigma)) + r @ np.linalg.inv(sigma) @ r)
    assert gaussian_logdensity(s, mu, sigma) == pytest.approx(ref, abs=1e-8)
    assert gaussian_logdensity(s, mu, sigma) == pytest.approx(sps.multivariate_normal(mu, sigma).logpdf(s), abs=1e-8)


def test_jitter_ladder_and_failure():
    f, jit = cholesky_jittered(np.eye(3))
    assert jit == 0.0
    f, jit = cholesky_jittered(np.ones((3, 3)))  # rank one
    assert jit in [d * 1.0 for d in JITTER_LADDER]
    with pytest.raises(SingularCovarianceError):
        cholesky_jittered(np.array([[1.0, np.nan], [np.nan, 1.0]]))
    with pytest.raises(SingularCovarianceError):
        cholesky_jittered(-np.eye(2))


def test_shrinkage():
    sigma = np.array([[2.0, 1.0], [1.0, 3.0]])
    np.testing.assert_array_equal(shrink_to_diagonal(sigma, 1.0), np.diag([2.0, 3.0]))
    np.testing.assert_array_equal(shrink_to_diagonal(sigma, 0.0), sigma)
    with pytest.raises(ValueError):
        shrink_to_diagonal(sigma, 1.5)


# --- synthetic likelihood -------------------------------------------------

def test_constant_simulator_gives_jitter_density():
    d = 3
    s_obs = np.array([1.0, -2.0, 0.5])

    def sim(thetas, rng):
        return np.tile(s_obs, (thetas.shape[0], 1))

    fit = sl_estimate(sim, ident, [0.0], s_obs, 20, seed=3)
    delta = JITTER_LADDER[0]
    assert fit.log_sl == pytest.approx(-d / 2 * math.log(2 * math.pi) - d / 2 * math.log(delta), rel=1e-12)


def test_gaussian_toy_matches_analytic():
    fit = sl_estimate(gauss_sim, ident, [0.4], [1.1], 100_000, seed=4)
    assert fit.log_sl == pytest.approx(sps.norm.logpdf(1.1, 0.4, 1.0), abs=0.01)


def test_failed_replicates():
    def sim(thetas, rng):
        out = thetas[:, :1] + rng.standard_normal((thetas.shape[0], 1))
        out[: int(0.2 * len(out))] = np.nan
        return out

    fit = sl_estimate(sim, ident, [0.0], [0.0], 100, seed=5)
    assert fit.log_sl == -math.inf and fit.n_failed == 20

    def sim_few(thetas, rng):
        out = thetas[:, :1] + rng.standard_normal((thetas.shape[0], 1))
        out[:5] = np.nan
        return out

    fit = sl_estimate(sim_few, ident, [0.0], [0.0], 100, seed=5)
    assert math.isfinite(fit.log_sl) and fit.n_failed == 5


def test_sl_seed_determinism_and_json():
    a = sl_estimate(gauss_sim, ident, [0.2], [0.0], 200, seed=6)
    b = sl_estimate(gauss_sim, ident, [0.2], [0.0], 200, seed=6)
    assert a.to_json() == b.to_json()
    assert json.loads(a.to_json())["m"] == 200


def test_sl_affine_invariance_of_differences():
    B = np.array([[1.5, 0.2], [-0.4, 2.0]])
    c = np.array([3.0, -1.0])

    def sim(thetas, rng):
        z = rng.standard_normal((thetas.shape[0], 2))
        return np.column_stack([thetas[:, 0] + z[:, 0], np.exp(thetas[:, 0]) + z[:, 1]])

    s_obs = np.array([0.1, 1.3])
    raw = [sl_estimate(sim, ident, [t], s_obs, 300, seed=7).log_sl for t in (0.0, 0.5)]
    aff = [sl_estimate(sim, lambda x: x @ B.T + c, [t], B @ s_obs + c, 300, seed=7).log_sl for t in (0.0, 0.5)]
    assert abs((raw[1] - raw[0]) - (aff[1] - aff[0])) < 1e-6


def test_exponential_sl_matches_closed_form_gaussian():
    # s = 1/mean(x) with mean(x) ~ Gamma(N, rate N*alpha): E s = N a/(N-1), Var s = (N a)^2/((N-1)^2 (N-2))
    from dynsbi.experiments import exponential_sl_curve
    N = 50
    alphas = np.array([0.6, 1.0, 1.5])
    out = exponential_sl_curve(1.0, N, alphas, 100_000, seed=21)
    mu = N * alphas / (N - 1)
    sd = N * alphas / ((N - 1) * np.sqrt(N - 2))
    # Monte Carlo error of the quadratic term grows with z^2, hence a relative tolerance
    np.testing.assert_allclose(out["synthetic"], sps.norm.logpdf(out["s_obs"], mu, sd), rtol=0.01, atol=0.02)
