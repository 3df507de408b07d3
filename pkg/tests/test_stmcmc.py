import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats

from mfstmcmc.likelihood import FunctionLikelihood
from mfstmcmc.network import PriorSpec, log_prior
from mfstmcmc.stmcmc import (
    GaussianProposal,
    Population,
    SamplerConfig,
    SamplerError,
    WeightStats,
    adapt_proposal,
    autocorrelation,
    chain_stream,
    cov_of_log_weights,
    ess_from_autocorrelation,
    importance_weights,
    mcmc_sweep,
    mh_iteration,
    mh_step,
    population_correlation,
    run_fixed_fidelity,
    systematic_resample,
    tune_delta_beta,
    update_scale,
    weighted_covariance,
)

finite_ll = arrays(np.float64, st.integers(2, 40), elements=st.floats(-50, 50))


# ---------------------------------------------------------------- tempering step

def test_delta_beta_two_point_closed_form():
    # weights {1, 100^db}: COV = (x - 1) / (x + 1) = 0.9 at x = 19
    db = tune_delta_beta([0.0, math.log(100.0)], 0.0, 0.9)
    assert db == pytest.approx(math.log(19.0) / math.log(100.0), rel=1e-5)
    assert db == pytest.approx(0.6394, abs=1e-4)


def test_delta_beta_capped_at_one_minus_beta():
    assert tune_delta_beta([0.0, 1e-3], 0.7, 1.0) == pytest.approx(0.3)
    assert tune_delta_beta(np.zeros(10), 0.0, 1.0) == 1.0
    assert tune_delta_beta([0.0, 5.0], 1.0, 1.0) == 0.0


def test_delta_beta_all_minus_inf_raises():
    with pytest.raises(SamplerError):
        tune_delta_beta([-np.inf, -np.inf], 0.0, 1.0)


@given(finite_ll, st.floats(-1e3, 1e3))
def test_delta_beta_invariant_to_likelihood_shift(ll, c):
    a = tune_delta_beta(ll, 0.0, 1.0)
    b = tune_delta_beta(ll + c, 0.0, 1.0)
    assert b == pytest.approx(a, rel=1e-5, abs=1e-12)


@given(finite_ll, st.floats(0.0, 0.9), st.floats(0.1, 3.0))
def test_delta_beta_hits_kappa_when_interior(ll, beta, kappa):
    db = tune_delta_beta(ll, beta, kappa)
    assert 0.0 <= db <= 1.0 - beta + 1e-15
    cov = cov_of_log_weights(db * ll)
    if db < 1.0 - beta:
        assert cov == pytest.approx(kappa, rel=1e-5)
    else:
        assert cov <= kappa * (1 + 1e-12)


@given(arrays(np.float64, st.integers(2, 50), elements=st.floats(-30, 30)))
def test_ess_matches_weight_ratio_form(lw):
    s = WeightStats(lw)
    w = np.exp(lw - lw.max())
    assert s.ess == pytest.approx(w.sum() ** 2 / np.sum(w * w), rel=1e-9)
    assert 1.0 - 1e-9 <= s.ess <= len(lw) + 1e-9
    assert s.normalized.sum() == pytest.approx(1.0)


def test_importance_weights_tempering_and_cross_model():
    ll = np.array([0.0, -1.0, -2.0])
    s = importance_weights(ll, 0.2, 0.5)
    assert np.allclose(s.log_weights, 0.3 * ll)
    t = importance_weights(ll, 0.5, 0.5, ll - 1.0)
    assert np.allclose(t.log_weights, -0.5)
    assert t.cov == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        importance_weights(ll, 0.5, 0.2)


def test_zero_beta_times_minus_inf_is_zero():
    s = importance_weights(np.array([-np.inf, 0.0]), 0.0, 0.0, np.array([-1.0, -2.0]))
    assert np.all(np.isfinite(s.log_weights))


# ---------------------------------------------------------------- resampling

def test_resample_all_weight_on_one_particle():
    w = np.zeros(10)
    w[7] = 1.0
    assert np.all(systematic_resample(w, np.random.default_rng(0)) == 7)


def test_resample_uniform_weights_is_identity():
    for seed in range(20):
        assert np.array_equal(systematic_resample(np.full(8, 1 / 8), np.random.default_rng(seed)), np.arange(8))


def test_resample_counts_floor_or_ceil():
    idx = systematic_resample([0.5, 0.25, 0.25], np.random.default_rng(3), n=4)
    assert np.bincount(idx, minlength=3).tolist() == [2, 1, 1]


@given(arrays(np.float64, st.integers(1, 30), elements=st.floats(1e-6, 1.0)), st.integers(0, 2**32 - 1))
def test_resample_offspring_within_one_of_expectation(w, seed):
    w = w / w.sum()
    counts = np.bincount(systematic_resample(w, np.random.default_rng(seed)), minlength=len(w))
    assert counts.sum() == len(w)
    assert np.all(np.abs(counts - len(w) * w) < 1.0 + 1e-9)


def test_resample_unbiased_chi_square():
    rng = np.random.default_rng(11)
    w = rng.dirichlet(np.ones(12))
    total = np.zeros(12)
    draws = 10_000
    for _ in range(draws):
        total += np.bincount(systematic_resample(w, rng), minlength=12)
    expected = draws * 12 * w
    assert stats.chisquare(total, expected).pvalue > 0.01


# ---------------------------------------------------------------- proposals

def test_adapted_covariance_of_standard_normal_cloud():
    th = np.random.default_rng(2).standard_normal((10_000, 3))
    cov = adapt_proposal(th, np.full(len(th), 1.0 / len(th)), 1.0)
    assert np.allclose(cov, np.eye(3), atol=0.05)


def test_adapted_covariance_uses_weights():
    th = np.array([[0.0], [1.0], [2.0], [10.0]])
    cov = weighted_covariance(th, [1.0, 1.0, 1.0, 0.0])
    assert cov[0, 0] == pytest.approx(np.var([0.0, 1.0, 2.0]))


def test_adapted_covariance_degenerate_population_is_regularised():
    th = np.ones((20, 3))
    cov = adapt_proposal(th, np.full(20, 0.05), 1.0)
    np.linalg.cholesky(cov)
    line = np.column_stack([np.arange(20.0), 2 * np.arange(20.0)])
    np.linalg.cholesky(adapt_proposal(line, np.full(20, 0.05), 0.5))


def test_adapted_covariance_needs_enough_particles():
    with pytest.raises(ValueError):
        adapt_proposal(np.zeros((3, 2)), np.ones(3), 1.0)


@given(st.floats(1e-3, 10.0), st.floats(0.0, 1.0))
def test_scale_update_direction(scale, acc):
    new = update_scale(scale, acc)
    assert new > 0
    if acc > 0.234:
        assert new > scale
    elif acc < 0.234:
        assert new < scale


def test_scale_fixed_point_at_target():
    assert update_scale(0.7, 0.234) == 0.7


# ---------------------------------------------------------------- Metropolis-Hastings

class Flip:
    """Deterministic move 0 <-> 1."""

    def propose(self, theta, rng):
        return 1.0 - theta


class Cycle:
    """Symmetric +-1 step on {0, 1, 2}."""

    def propose(self, theta, rng):
        return (theta + (1.0 if rng.random() < 0.5 else -1.0)) % 3.0


class Independent:
    def propose(self, theta, rng):
        return rng.standard_normal(len(theta))


def _discrete_prior(p):
    lp = np.log(p)
    return lambda c: lp[np.asarray(c)[:, 0].astype(int)]


def test_mh_accepts_uphill_always():
    rng = np.random.default_rng(0)
    for _ in range(200):
        th, ll, lp, acc = mh_step(np.array([0.0]), -5.0, 0.0, 1.0, lambda t: -1.0, lambda t: 0.0, Flip(), rng)
        assert acc and th[0] == 1.0 and ll == -1.0


def test_mh_rejects_minus_inf_candidate():
    rng = np.random.default_rng(0)
    for beta in (0.0, 0.5, 1.0):
        for _ in range(50):
            th, ll, _, acc = mh_step(np.array([0.0]), -1.0, 0.0, beta, lambda t: -np.inf, lambda t: 0.0, Flip(), rng)
            assert not acc and th[0] == 0.0 and ll == -1.0


def test_mh_two_state_acceptance_rate():
    n = 100_000
    pop = Population(np.zeros((n, 1)), np.zeros(n), np.full(n, math.log(0.5)))
    rngs = [chain_stream(4, 0, i) for i in range(n)]
    _, acc = mh_iteration(pop, 1.0, lambda c: np.zeros(len(c)), _discrete_prior([0.5, 0.15]), Flip(), rngs)
    p = 0.3
    assert abs(acc.mean() - p) < 3 * math.sqrt(p * (1 - p) / n)


def test_mh_detailed_balance_three_points():
    target = np.array([0.2, 0.3, 0.5])
    n_chains, n_steps = 10_000, 100
    rng = np.random.default_rng(9)
    start = rng.integers(0, 3, n_chains).astype(float)[:, None]
    lp_fn = _discrete_prior(target)
    pop = Population(start, np.zeros(n_chains), lp_fn(start))
    rngs = [chain_stream(9, 1, i) for i in range(n_chains)]
    for _ in range(n_steps):
        pop, _ = mh_iteration(pop, 1.0, lambda c: np.zeros(len(c)), lp_fn, Cycle(), rngs)
    counts = np.bincount(pop.thetas[:, 0].astype(int), minlength=3)
    assert stats.chisquare(counts, n_chains * target).pvalue > 0.001


def test_mh_same_streams_same_moves():
    def run():
        pop = Population(np.zeros((16, 2)), np.zeros(16), np.zeros(16))
        rngs = [chain_stream(5, 3, i) for i in range(16)]
        return mh_iteration(pop, 0.5, lambda c: -np.sum(c * c, axis=1), lambda c: np.zeros(len(c)),
                            GaussianProposal(np.eye(2)), rngs)

    (a, fa), (b, fb) = run(), run()
    assert np.array_equal(a.thetas, b.thetas) and np.array_equal(fa, fb)


# ---------------------------------------------------------------- sweeps

def _gauss_pop(n, d, seed):
    th = np.random.default_rng(seed).standard_normal((n, d))
    return Population(th, np.zeros(n), np.zeros(n))


def test_sweep_target_one_stops_after_one_iteration():
    pop = _gauss_pop(50, 2, 0)
    rngs = [chain_stream(0, 1, i) for i in range(50)]
    res = mcmc_sweep(pop, 1.0, lambda c: np.zeros(len(c)), lambda c: np.zeros(len(c)),
                     GaussianProposal(0.01 * np.eye(2)), rngs, correlation_target=1.0)
    assert res.iterations == 1


def test_sweep_independent_proposal_decorrelates_in_one_step():
    pop = _gauss_pop(500, 2, 1)
    rngs = [chain_stream(1, 1, i) for i in range(500)]
    res = mcmc_sweep(pop, 1.0, lambda c: np.zeros(len(c)), lambda c: np.zeros(len(c)),
                     Independent(), rngs, correlation_target=0.6)
    assert res.iterations == 1 and res.correlation < 0.6 and res.acceptance == 1.0


def test_sweep_gaussian_target_terminates():
    prior = PriorSpec(np.zeros(2), np.ones(2))
    finished = 0
    for seed in range(50):
        pop = _gauss_pop(200, 2, seed)
        pop.log_prior = log_prior(pop.thetas, prior)
        cov = adapt_proposal(pop.thetas, np.full(200, 1 / 200), 2.38 / math.sqrt(2))
        rngs = [chain_stream(seed, 1, i) for i in range(200)]
        res = mcmc_sweep(pop, 1.0, lambda c: np.zeros(len(c)), lambda c: log_prior(c, prior),
                         GaussianProposal(cov), rngs, 0.6, 100)
        finished += res.iterations < 100
    assert finished >= 48


def test_population_correlation_constant_coordinate_counts_as_zero():
    a = np.column_stack([np.arange(10.0), np.ones(10)])
    b = np.column_stack([np.arange(10.0)[::-1], np.ones(10)])
    assert population_correlation(a, b) == pytest.approx(1.0)
    assert population_correlation(np.ones((5, 2)), np.ones((5, 2))) == 0.0


@given(arrays(np.float64, st.tuples(st.integers(3, 60), st.integers(1, 3)), elements=st.floats(-1e3, 1e3)))
def test_autocorrelation_bounded(chain):
    rho = autocorrelation(chain, 10)
    assert np.all(np.abs(rho) <= 1.0)
    ess = ess_from_autocorrelation(rho)
    assert np.all(ess > 0)


def test_autocorrelation_lag_zero_is_one():
    x = np.random.default_rng(0).standard_normal((500, 2))
    rho = autocorrelation(x, 5)
    assert np.allclose(rho[0], 1.0)
    assert np.all(np.abs(rho[1:]) < 0.15)


# ---------------------------------------------------------------- full runs

def test_flat_likelihood_returns_prior():
    prior = PriorSpec(np.array([1.0, -2.0]), np.array([0.5, 2.0]))
    n = 1000
    res = run_fixed_fidelity(FunctionLikelihood([lambda t: 0.0]), prior, SamplerConfig(n_particles=n, seed=3))
    assert len(res.levels) == 1 and res.levels[0].beta == 1.0
    z = (res.samples.mean(axis=0) - prior.mean) / prior.std
    assert np.all(np.abs(z) < 4 / math.sqrt(n))
    assert res.log_evidence == pytest.approx(0.0, abs=1e-12)


def test_conjugate_gaussian_posterior_and_evidence():
    y, s = 1.5, 0.5
    like = FunctionLikelihood([lambda t: stats.norm.logpdf(y, t[0], s)])
    prior = PriorSpec(np.zeros(1), np.ones(1))
    res = run_fixed_fidelity(like, prior, SamplerConfig(n_particles=2000, seed=7))
    post_var = 1.0 / (1.0 + 1.0 / s ** 2)
    post_mean = post_var * y / s ** 2
    assert res.samples.mean() == pytest.approx(post_mean, abs=0.05)
    assert res.samples.std() == pytest.approx(math.sqrt(post_var), rel=0.08)
    exact = stats.norm.logpdf(y, 0.0, math.sqrt(1.0 + s ** 2))
    assert abs(res.log_evidence - exact) < 4 * res.log_evidence_sigma + 0.05
    assert res.levels[-1].beta == 1.0
    assert all(b.beta > a.beta for a, b in zip(res.levels, res.levels[1:]))


def test_worker_count_does_not_change_samples():
    f = lambda t: -0.5 * float(np.sum((t - 0.3) ** 2)) / 0.04  # noqa: E731
    prior = PriorSpec(np.zeros(2), np.ones(2))
    cfg = SamplerConfig(n_particles=64, seed=2)
    a = FunctionLikelihood([f], workers=1)
    b = FunctionLikelihood([f], workers=3)
    try:
        ra = run_fixed_fidelity(a, prior, cfg)
        rb = run_fixed_fidelity(b, prior, cfg)
    finally:
        a.close()
        b.close()
    assert np.array_equal(ra.samples, rb.samples)
    assert ra.log_evidence == rb.log_evidence


def test_level_log_is_json_lines(tmp_path):
    import json

    path = tmp_path / "levels.jsonl"
    like = FunctionLikelihood([lambda t: -float(t[0] ** 2) * 10])
    res = run_fixed_fidelity(like, PriorSpec(np.zeros(1), np.ones(1)), SamplerConfig(n_particles=32), log_path=path)
    rows = [json.loads(line) for line in path.read_text().splitlines()]
    assert len(rows) == len(res.levels)
    assert rows[-1]["beta"] == 1.0
    assert res.samples_csv().splitlines()[0] == "theta0,log_like,log_prior"


def test_sampler_config_validation():
    with pytest.raises(ValueError):
        SamplerConfig(n_particles=1)
    with pytest.raises(ValueError):
        SamplerConfig(kappa=0.0)
