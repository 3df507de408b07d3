import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats
from scipy.special import logsumexp

from mfstmcmc.likelihood import FunctionLikelihood
from mfstmcmc.multifi import (
    STRATEGIES,
    BridgingStrategy,
    ess_bridge_decide,
    it_criterion,
    run_multifidelity,
    run_report,
    select_next_level,
    total_log_evidence,
    tune_beta_cross_fidelity,
)
from mfstmcmc.network import PriorSpec
from mfstmcmc.stmcmc import (
    AnnealState,
    EvidenceAccumulator,
    Population,
    SamplerConfig,
    SamplerError,
    WeightStats,
    chain_stream,
    cov_of_log_weights,
    level_evidence_ratio,
    run_fixed_fidelity,
    tune_delta_beta,
)

PRIOR1 = PriorSpec(np.zeros(1), np.ones(1))


def gauss_ll(center, width):
    return lambda t: -0.5 * float(np.sum((np.asarray(t) - center) ** 2)) / width ** 2


# ---------------------------------------------------------------- ESS bridge rule

def test_ess_identical_fidelities_temper():
    ll = np.array([-1.0, -3.0, -7.0])
    decision, cov = ess_bridge_decide(ll, ll, 0.6, 0.5)
    assert decision == "temper" and cov == 0.0


def test_ess_beta_zero_always_tempers():
    decision, _ = ess_bridge_decide(np.zeros(3), np.array([0.0, -50.0, -500.0]), 0.0, 0.1)
    assert decision == "temper"


def test_ess_tie_at_kappa_tempers():
    beta = math.log(19.0) / math.log(100.0)
    decision, cov = ess_bridge_decide(np.zeros(2), np.array([0.0, math.log(100.0)]), beta, 0.9)
    assert cov == pytest.approx(0.9, rel=1e-12)
    assert decision == "temper"
    decision, _ = ess_bridge_decide(np.zeros(2), np.array([0.0, math.log(100.0)]), beta * 1.01, 0.9)
    assert decision == "bridge"


# ---------------------------------------------------------------- IT criterion

def test_it_constant_surrogate_is_zero():
    ll_top = np.array([-3.0, -1.0, -8.0, -2.5])
    assert it_criterion(np.full(4, -4.2), ll_top, 0.3, 0.4) == pytest.approx(0.0, abs=1e-12)


def test_it_identical_models_nonnegative_random_populations():
    rng = np.random.default_rng(0)
    worst = math.inf
    for _ in range(1000):
        n = int(rng.integers(2, 200))
        ll = -np.abs(rng.standard_normal(n)) * 10.0 ** rng.uniform(-1, 3)
        beta = rng.uniform(0, 1)
        db = rng.uniform(0, 1 - beta) + 1e-12
        worst = min(worst, it_criterion(ll, ll, beta, db))
    assert worst >= -1e-12


@given(arrays(np.float64, st.integers(2, 40), elements=st.floats(-200, 0)),
       st.floats(0.0, 0.99), st.floats(1e-6, 1.0))
def test_it_identical_models_nonnegative(ll, beta, frac):
    db = frac * (1.0 - beta)
    assert it_criterion(ll, ll, beta, db) >= -1e-12


def _it_brute_force(ll_m, ll_top, beta, db):
    r = np.exp(ll_top - beta * ll_m)
    x = db * ll_m
    return np.sum(r * x) - np.sum(r) * np.log(np.mean(np.exp(x)))


def test_it_opposite_ranking_is_negative():
    ll_m, ll_top = np.array([0.0, -5.0]), np.array([-5.0, 0.0])
    beta, db = 0.5, 0.3
    brute = _it_brute_force(ll_m, ll_top, beta, db)
    r_max = np.exp(np.max(ll_top - beta * ll_m))
    got = it_criterion(ll_m, ll_top, beta, db)
    assert brute < 0 and got < 0
    assert got == pytest.approx(brute / r_max, rel=1e-12)


@given(arrays(np.float64, 6, elements=st.floats(-30, 0)), arrays(np.float64, 6, elements=st.floats(-30, 0)),
       st.floats(0.0, 0.9), st.floats(0.01, 0.1), st.floats(-100, 100))
def test_it_sign_invariant_to_matched_shift(ll_m, ll_top, beta, db, c):
    a = it_criterion(ll_m, ll_top, beta, db)
    b = it_criterion(ll_m + c, ll_top + beta * c, beta, db)
    assert b == pytest.approx(a, rel=1e-6, abs=1e-9)
    if abs(a) > 1e-9:
        assert np.sign(a) == np.sign(b)


def test_it_excludes_infinite_pairs_and_fails_when_none_left():
    ll_m = np.array([0.0, -np.inf, -2.0])
    ll_top = np.array([-1.0, -1.0, -np.inf])
    assert np.isfinite(it_criterion(ll_m, ll_top, 0.2, 0.1))
    with pytest.raises(SamplerError):
        it_criterion(np.array([-np.inf, 0.0]), np.array([0.0, -np.inf]), 0.2, 0.1)


# ---------------------------------------------------------------- cross-fidelity beta

def test_cross_beta_two_point_closed_form():
    beta_new, cov = tune_beta_cross_fidelity(np.zeros(2), np.array([0.0, math.log(100.0)]), 0.3, 0.9)
    assert abs(beta_new - math.log(19.0) / math.log(100.0)) < 2e-3
    assert cov <= 0.9


def test_cross_beta_identical_fidelities_matches_tempering_step():
    ll = np.random.default_rng(1).normal(-20, 5, 100)
    beta = 0.2
    expected = beta + tune_delta_beta(ll, beta, 1.0)
    got, _ = tune_beta_cross_fidelity(ll, ll, beta, 1.0)
    assert abs(got - expected) < 2e-3
    shifted, _ = tune_beta_cross_fidelity(ll, ll + 37.0, beta, 1.0)
    assert shifted == pytest.approx(got, abs=1e-9)


def test_cross_beta_reaches_one_when_cheap():
    ll = np.array([-1.0, -1.1, -0.9])
    assert tune_beta_cross_fidelity(ll, ll, 0.5, 1.0)[0] == 1.0


def test_cross_beta_fallback_minimises_cov():
    ll_m = np.array([0.0, -40.0])
    ll_next = np.array([0.0, 0.0])
    beta_new, cov = tune_beta_cross_fidelity(ll_m, ll_next, 1.0, 0.01)
    grid = np.linspace(0, 1, 1001)
    covs = [cov_of_log_weights(g * ll_next - ll_m) for g in grid]
    assert cov == pytest.approx(min(covs))
    assert cov > 0.01


# ---------------------------------------------------------------- dispatcher

def _state(ll, beta, fidelity, top, n=20):
    th = np.random.default_rng(0).standard_normal((n, 1))
    return AnnealState(Population(th, np.asarray(ll, dtype=float), np.zeros(n)), beta, fidelity, 0, 1.0, top)


def test_top_fidelity_behaves_like_full():
    ll = np.random.default_rng(2).normal(-10, 3, 20)
    like = FunctionLikelihood([gauss_ll(0, 1), gauss_ll(0, 1)])
    for kind in STRATEGIES:
        tr = select_next_level(BridgingStrategy(kind), _state(ll, 0.1, 1, 1), like)
        assert tr.decision == "temper" and tr.fidelity == 1
        assert tr.beta == pytest.approx(0.1 + tune_delta_beta(ll, 0.1, 1.0))
    assert like.solve_counts.sum() == 0


def test_nonnegative_it_keeps_model_and_tempers():
    f = gauss_ll(0.0, 0.5)
    like = FunctionLikelihood([f, f])
    st_ = _state(None, 0.0, 0, 1)
    st_.pop.log_like = like.evaluate(st_.pop.thetas, 0)
    for kind in ("it", "tuned-it"):
        tr = select_next_level(BridgingStrategy(kind), st_, like)
        assert tr.decision == "temper" and tr.fidelity == 0
        assert tr.beta == pytest.approx(tune_delta_beta(st_.pop.log_like, 0.0, 1.0))
        assert tr.info["it_criterion"] >= 0


def test_it_subset_limits_top_solves():
    like = FunctionLikelihood([gauss_ll(0.0, 0.5), gauss_ll(0.1, 0.5)])
    st_ = _state(None, 0.0, 0, 1, n=40)
    st_.pop.log_like = like.evaluate(st_.pop.thetas, 0)
    select_next_level(BridgingStrategy("it", n_it=10), st_, like)
    assert like.solve_counts[1] == 10


def _first_bridge_beta(res):
    for prev, rec in zip([None] + res.levels, res.levels):
        if rec.strategy_decision == "bridge":
            return prev.beta if prev else 0.0
    return None


def test_it_bridges_before_ess_when_surrogate_drifts():
    # surrogate concentrates near 2, the full model near -0.5
    like_fns = [gauss_ll(2.0, 0.3), gauss_ll(-0.5, 0.3)]
    cfg = SamplerConfig(n_particles=200, seed=4)
    b_it = _first_bridge_beta(run_multifidelity(FunctionLikelihood(like_fns), PRIOR1, cfg, "it"))
    b_ess = _first_bridge_beta(run_multifidelity(FunctionLikelihood(like_fns), PRIOR1, cfg, "ess"))
    assert b_it is not None and b_ess is not None
    assert b_it < b_ess


def test_bridge_strategy_validation():
    with pytest.raises(ValueError):
        BridgingStrategy("nope")
    with pytest.raises(ValueError):
        BridgingStrategy("ess", kappa_bridge=0.0)


# ---------------------------------------------------------------- full runs

def test_single_level_hierarchy_collapses_to_fixed_fidelity():
    f = gauss_ll(0.4, 0.2)
    cfg = SamplerConfig(n_particles=64, seed=11)
    ref = run_fixed_fidelity(FunctionLikelihood([f]), PRIOR1, cfg)
    for kind in STRATEGIES:
        res = run_multifidelity(FunctionLikelihood([f]), PRIOR1, cfg, kind)
        assert np.array_equal(res.samples, ref.samples)
        assert res.log_evidence == ref.log_evidence
        assert [r.beta for r in res.levels] == [r.beta for r in ref.levels]


@pytest.mark.parametrize("kind", STRATEGIES)
def test_flat_three_level_run_telescopes_to_zero(kind):
    n = 500
    like = FunctionLikelihood([lambda t: 0.0] * 3)
    res = run_multifidelity(like, PRIOR1, SamplerConfig(n_particles=n, seed=1), kind)
    assert all(r.log_c_l == 0.0 for r in res.levels)
    assert res.log_evidence == 0.0
    assert abs(res.samples.mean()) < 4 / math.sqrt(n)
    assert res.levels[-1].fidelity == 2 and res.levels[-1].beta == 1.0


@pytest.mark.parametrize("kind", STRATEGIES)
def test_fidelity_moves_by_at_most_one(kind):
    fns = [gauss_ll(0.8, 0.6), gauss_ll(0.5, 0.4), gauss_ll(0.3, 0.25)]
    res = run_multifidelity(FunctionLikelihood(fns), PRIOR1, SamplerConfig(n_particles=128, seed=2), kind)
    fid = [0 if kind != "full" else 2] + [r.fidelity for r in res.levels]
    betas = [0.0] + [r.beta for r in res.levels]
    assert all(b - a in (0, 1) for a, b in zip(fid, fid[1:]))
    assert all(0.0 <= b <= 1.0 for b in betas)
    if kind != "tuned-it":
        assert all(b >= a for a, b in zip(betas, betas[1:]))
    assert fid[-1] == 2 and betas[-1] == 1.0
    assert all(r.strategy_decision == ("bridge" if b > a else "temper")
               for a, b, r in zip(fid, fid[1:], res.levels))


def test_one_level_evidence_is_prior_monte_carlo():
    f = lambda t: 0.1 * float(t[0])  # noqa: E731
    n, seed = 300, 5
    res = run_fixed_fidelity(FunctionLikelihood([f]), PRIOR1, SamplerConfig(n_particles=n, seed=seed))
    assert len(res.levels) == 1
    th = np.array([PRIOR1.sample(1, chain_stream(seed, 0, i))[0] for i in range(n)])
    ll = np.array([f(t) for t in th])
    assert res.log_evidence == pytest.approx(logsumexp(ll) - math.log(n), rel=1e-12)


def test_two_point_prior_evidence():
    l1, l2 = 0.7, 0.05
    f = lambda t: math.log(l1) if t[0] < 0 else math.log(l2)  # noqa: E731
    res = run_fixed_fidelity(FunctionLikelihood([f]), PRIOR1, SamplerConfig(n_particles=2000, seed=8))
    exact = math.log((l1 + l2) / 2)
    assert abs(res.log_evidence - exact) < 4 * res.log_evidence_sigma + 1e-3


@pytest.mark.parametrize("kind", STRATEGIES)
def test_conjugate_gaussian_evidence_through_hierarchy(kind):
    y, s = 1.0, 0.3
    fns = [lambda t: stats.norm.logpdf(y + 0.3, t[0], 0.5), lambda t: stats.norm.logpdf(y, t[0], s)]
    res = run_multifidelity(FunctionLikelihood(fns), PRIOR1, SamplerConfig(n_particles=1000, seed=3), kind)
    exact = stats.norm.logpdf(y, 0.0, math.sqrt(1.0 + s ** 2))
    assert abs(res.log_evidence - exact) < 3 * res.log_evidence_sigma + 0.05
    post_var = 1.0 / (1.0 + 1.0 / s ** 2)
    assert res.samples.mean() == pytest.approx(post_var * y / s ** 2, abs=0.05)


def test_strategies_agree_on_toy_posterior():
    fns = [gauss_ll([0.5, -0.2], 0.5), gauss_ll([0.3, 0.0], 0.3)]
    prior = PriorSpec(np.zeros(2), np.ones(2))
    means, stds = [], []
    for kind in STRATEGIES:
        res = run_multifidelity(FunctionLikelihood(fns), prior, SamplerConfig(n_particles=500, seed=6), kind)
        means.append(res.samples.mean(axis=0))
        stds.append(res.samples.std(axis=0))
    pooled = np.sqrt(np.mean(np.square(stds), axis=0))
    means = np.array(means)
    assert np.all(means.max(axis=0) - means.min(axis=0) <= 0.5 * pooled)


def test_multifidelity_worker_count_does_not_change_output():
    fns = [gauss_ll(0.5, 0.5), gauss_ll(0.3, 0.3)]
    cfg = SamplerConfig(n_particles=48, seed=9)
    out = []
    for workers in (1, 2):
        like = FunctionLikelihood(fns, workers=workers)
        try:
            out.append(run_multifidelity(like, PRIOR1, cfg, "tuned-it"))
        finally:
            like.close()
    assert np.array_equal(out[0].samples, out[1].samples)
    assert out[0].log_evidence == out[1].log_evidence


def test_run_report_fields():
    like = FunctionLikelihood([gauss_ll(0.5, 0.5), gauss_ll(0.3, 0.3)])
    res = run_multifidelity(like, PRIOR1, SamplerConfig(n_particles=32, seed=0), "ess")
    rep = run_report(res, "ess")
    assert rep["full_model_solves"] == rep["per_fidelity_solve_counts"][-1] == like.solve_counts[-1]
    assert rep["final_beta"] == 1.0 and rep["final_fidelity"] == 1
    assert rep["levels"] == len(res.levels)


# ---------------------------------------------------------------- evidence bookkeeping

def test_evidence_unit_weights_give_zero():
    assert level_evidence_ratio(WeightStats(np.zeros(10))) == (0.0, 0.0)


def test_evidence_accumulator_sums_levels():
    acc = EvidenceAccumulator()
    acc.add(WeightStats(np.log([1.0, 3.0])))
    acc.add(WeightStats(np.log([2.0, 2.0])))
    log_z, sigma = total_log_evidence(acc)
    assert log_z == pytest.approx(math.log(2.0) + math.log(2.0))
    assert sigma == pytest.approx(math.sqrt(0.25 / 2))
    assert total_log_evidence(EvidenceAccumulator()) == (0.0, 0.0)
