import math

import numpy as np
import pytest
from scipy import stats as sps
from scipy.special import logsumexp

from dynsbi.models import VOLE_TRUTH, LgSsmParams, LinearGaussianModel, VoleModel, kalman_loglik, lg_ssm_simulate, vole_simulate
from dynsbi.pfilter import (DegenerateFilterError, averaged_loglik, multinomial_resample, normalize_log_weights,
                            sir_loglik)
from dynsbi.rng import spawn

LG = LgSsmParams(0.9, 1.0, 0.5, 0.8)


# --- weights and resampling -----------------------------------------------

def test_normalize_log_weights():
    lw = np.array([-1000.0, -1001.0, -1002.5])
    w, inc = normalize_log_weights(lw)
    assert w.sum() == pytest.approx(1.0, abs=1e-15)
    assert inc == pytest.approx(logsumexp(lw) - math.log(3), abs=1e-12)
    w, inc = normalize_log_weights(np.full(4, -np.inf))
    assert inc == -math.inf


def test_resample_point_mass():
    w = np.zeros(6)
    w[4] = 1.0
    assert np.all(multinomial_resample(w, 100, 1) == 4)


def test_resample_uniform_frequencies():
    M = 8
    m = 10 ** 5
    counts = np.bincount(multinomial_resample(np.full(M, 1 / M), m, 2), minlength=M)
    sd = math.sqrt(m * (1 / M) * (1 - 1 / M))
    assert np.all(np.abs(counts - m / M) < 3 * sd)


def test_resample_two_point_binomial():
    m = 10 ** 5
    k = int(np.sum(multinomial_resample(np.array([0.25, 0.75]), m, 3) == 1))
    assert abs(k - 0.75 * m) < 3 * math.sqrt(m * 0.75 * 0.25)


def test_resample_validation():
    with pytest.raises(DegenerateFilterError):
        multinomial_resample(np.zeros(3), 5, 1)
    with pytest.raises(ValueError):
        multinomial_resample(np.array([0.5, -0.1, 0.6]), 5, 1)
    with pytest.raises(ValueError):
        multinomial_resample(np.array([0.2, 0.2]), 5, 1)


# --- SIR ------------------------------------------------------------------

def test_sir_close_to_kalman():
    y = lg_ssm_simulate(LG, 30, seed=4).obs
    model = LinearGaussianModel(LG, free=())
    est = np.array([sir_loglik(model, [], y, 1000, ss).value for ss in spawn(5, 30)])
    exact = kalman_loglik(LG, y)
    assert abs(est.mean() - exact) < 3 * est.std(ddof=1) / math.sqrt(len(est)) + 0.05


def test_sir_deterministic_states_exact():
    # a state with no process noise: every particle follows the same path
    class Deterministic:
        def initial(self, theta, m, rng):
            return np.full((m, 1), 2.0)

        def propagate(self, theta, states, t, rng):
            return states * 1.1

        def log_obs(self, theta, states, y_t):
            return sps.poisson.logpmf(y_t, theta[0] * states[:, 0])

    y = np.array([3, 5, 4, 6, 2])
    path = 2.0 * 1.1 ** np.arange(1, 6)
    exact = float(np.sum(sps.poisson.logpmf(y, 1.5 * path)))
    for m in (2, 7, 50):
        assert sir_loglik(Deterministic(), [1.5], y, m, m).value == pytest.approx(exact, abs=1e-10)


def test_sir_degenerate_returns_minus_inf():
    class Impossible:
        def initial(self, theta, m, rng):
            return np.zeros((m, 1))

        def propagate(self, theta, states, t, rng):
            return states

        def log_obs(self, theta, states, y_t):
            return np.full(states.shape[0], -np.inf) if t_is_bad(y_t) else np.zeros(states.shape[0])

    def t_is_bad(y_t):
        return y_t < 0

    est = sir_loglik(Impossible(), [], np.array([1, 1, -1, 1]), 10, 1)
    assert est.value == -math.inf and est.failed_at == 2


def test_sir_vole_truth_finite():
    tr = vole_simulate(VOLE_TRUTH, seed=6)
    est = sir_loglik(VoleModel(), VOLE_TRUTH.to_array(), tr.obs, 1000, 7, record_steps=True)
    assert math.isfinite(est.value)
    assert len(est.steps) == 90
    assert est.steps_csv().startswith("t,ess,log_increment\n")


def test_sir_seed_determinism():
    y = lg_ssm_simulate(LG, 20, seed=8).obs
    model = LinearGaussianModel(LG, free=())
    assert sir_loglik(model, [], y, 100, 9).value == sir_loglik(model, [], y, 100, 9).value


# --- averaging ------------------------------------------------------------

def test_average_single_replicate_matches_sir():
    y = lg_ssm_simulate(LG, 20, seed=10).obs
    model = LinearGaussianModel(LG, free=())
    a = averaged_loglik(model, [], y, 300, 1, seed=11).value
    b = sir_loglik(model, [], y, 300, spawn(11, 1)[0]).value
    assert a == b


def test_average_unbiased_on_natural_scale():
    y = lg_ssm_simulate(LG, 10, seed=12).obs
    model = LinearGaussianModel(LG, free=())
    exact = math.exp(kalman_loglik(LG, y))
    lik = np.exp([averaged_loglik(model, [], y, 200, 4, ss).value for ss in spawn(13, 200)])
    assert abs(lik.mean() - exact) < 3 * lik.std(ddof=1) / math.sqrt(200)


def test_average_c4_vs_c1():
    y = lg_ssm_simulate(LG, 20, seed=14).obs
    model = LinearGaussianModel(LG, free=())
    one = np.array([averaged_loglik(model, [], y, 400, 1, ss).value for ss in spawn(15, 60)])
    four = np.array([averaged_loglik(model, [], y, 400, 4, ss).value for ss in spawn(16, 60)])
    se = math.sqrt(one.var(ddof=1) / 60 + four.var(ddof=1) / 60)
    assert abs(one.mean() - four.mean()) < 3 * se


def test_average_threads_do_not_change_result():
    y = lg_ssm_simulate(LG, 15, seed=17).obs
    model = LinearGaussianModel(LG, free=())
    assert averaged_loglik(model, [], y, 400, 4, 18, threads=1).value == \
        averaged_loglik(model, [], y, 400, 4, 18, threads=3).value


def test_average_validation():
    model = LinearGaussianModel(LG, free=())
    with pytest.raises(ValueError):
        averaged_loglik(model, [], np.zeros(3), 100, 3, 1)
