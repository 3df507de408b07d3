"""Sequential tempered MCMC: annealing, weighting, resampling and MH sweeps.

Parameters are sampled in log10 space.  Every chain owns one Philox stream
per level, derived from ``(seed, level, chain)``; the population-level
resampling draw uses its own stream.  Nothing depends on how likelihood
batches are distributed over workers.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy.special import logsumexp

from .network import PriorSpec, log_prior

logger = logging.getLogger(__name__)

RESAMPLE_STREAM = 2**32 - 1


class SamplerError(RuntimeError):
    pass


def chain_stream(seed: int, level: int, chain: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(level), int(chain)])))


def scaled_log_like(beta: float, log_like) -> np.ndarray:
    """``beta * L`` with the convention ``0 * (-inf) = 0``."""
    ll = np.asarray(log_like, dtype=float)
    if beta == 0.0:
        return np.zeros_like(ll)
    return beta * ll


# ---------------------------------------------------------------- weights

@dataclass
class WeightStats:
    log_weights: np.ndarray

    def __post_init__(self):
        lw = np.asarray(self.log_weights, dtype=float)
        lw = np.where(np.isnan(lw), -np.inf, lw)
        self.log_weights = lw
        if not np.any(np.isfinite(lw)):
            raise SamplerError("all importance weights are zero")
        shifted = np.exp(lw - lw.max())
        self._mean = shifted.mean()
        self.normalized = shifted / shifted.sum()
        self.cov = float(shifted.std() / self._mean)

    @property
    def ess(self) -> float:
        return len(self.log_weights) / (1.0 + self.cov ** 2)

    @property
    def log_mean(self) -> float:
        return float(logsumexp(self.log_weights) - math.log(len(self.log_weights)))

    @property
    def mean_variance(self) -> float:
        """Delta-method variance of log(mean weight): var(w) / (N mean^2)."""
        return self.cov ** 2 / len(self.log_weights)


def cov_of_log_weights(log_w) -> float:
    lw = np.asarray(log_w, dtype=float)
    finite = np.isfinite(lw)
    if not finite.any():
        return math.inf
    w = np.exp(np.where(finite, lw - lw[finite].max(), -np.inf))
    return float(w.std() / w.mean())


def importance_weights(log_like_old, beta_old: float, beta_new: float,
                       log_like_new=None) -> WeightStats:
    """Weights for moving from (beta_old, model of log_like_old) to (beta_new, model of log_like_new).

    Without ``log_like_new`` the model is unchanged and the weights reduce to
    ``exp((beta_new - beta_old) L)``.
    """
    if log_like_new is None:
        if beta_new < beta_old:
            raise ValueError("tempering within one model cannot lower beta")
        return WeightStats(scaled_log_like(beta_new - beta_old, log_like_old))
    a = scaled_log_like(beta_new, log_like_new)
    b = scaled_log_like(beta_old, log_like_old)
    with np.errstate(invalid="ignore"):
        return WeightStats(a - b)


def tune_delta_beta(log_likes, beta: float, kappa: float, rtol: float = 1e-6) -> float:
    """Largest step with weight COV equal to ``kappa``; the cap ``1 - beta`` if never reached."""
    ll = np.asarray(log_likes, dtype=float)
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    if not np.any(np.isfinite(ll)):
        raise SamplerError("all log-likelihoods are -inf")
    cap = 1.0 - beta
    if cap <= 0.0:
        return 0.0
    if cov_of_log_weights(cap * ll) <= kappa:
        return cap
    lo, hi = 0.0, cap
    # bisect well past rtol so COV lands within 1e-5 relative of kappa
    while hi - lo > 1e-3 * rtol * hi:
        mid = 0.5 * (lo + hi)
        if cov_of_log_weights(mid * ll) > kappa:
            hi = mid
        else:
            lo = mid
        if hi - lo <= 1e-15:
            break
    return 0.5 * (lo + hi) if lo > 0 else hi


def systematic_resample(weights, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    n = len(w) if n is None else n
    u = (rng.random() + np.arange(n)) / n
    cdf = np.cumsum(w)
    cdf /= cdf[-1]
    return np.minimum(np.searchsorted(cdf, u, side="right"), len(w) - 1)


def resample(stats: WeightStats, rng: np.random.Generator) -> np.ndarray:
    return systematic_resample(stats.normalized, rng)


# ---------------------------------------------------------------- proposals

class GaussianProposal:
    """Random walk ``theta + chol @ z``."""

    def __init__(self, cov):
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        self.cov = cov
        self.chol = np.linalg.cholesky(cov)

    def propose(self, theta, rng):
        return theta + self.chol @ rng.standard_normal(len(theta))


def weighted_covariance(thetas, weights) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    w = w / w.sum()
    mu = w @ thetas
    d = thetas - mu
    return (d * w[:, None]).T @ d


def adapt_proposal(thetas, weights, scale: float) -> np.ndarray:
    """Weighted population covariance times ``scale**2``, regularised if singular."""
    thetas = np.atleast_2d(thetas)
    n, d = thetas.shape
    if n < d + 2:
        raise ValueError(f"need at least {d + 2} particles for a {d}-dimensional proposal")
    cov = scale ** 2 * weighted_covariance(thetas, weights)
    cov = 0.5 * (cov + cov.T)
    try:
        np.linalg.cholesky(cov)
        return cov
    except np.linalg.LinAlgError:
        pass
    tr = float(np.trace(cov))
    jitter = 1e-10 * tr / d if tr > 0 else 1e-10
    reg = cov + jitter * np.eye(d)
    try:
        np.linalg.cholesky(reg)
        return reg
    except np.linalg.LinAlgError:
        return np.diag(np.maximum(np.diag(cov), 0.0) + jitter)


def update_scale(scale: float, acceptance: float, target: float = 0.234, rate: float = 1.0) -> float:
    return scale * math.exp(rate * (acceptance - target))


# ---------------------------------------------------------------- MH moves

@dataclass
class Population:
    thetas: np.ndarray
    log_like: np.ndarray
    log_prior: np.ndarray

    def take(self, idx) -> "Population":
        return Population(self.thetas[idx].copy(), self.log_like[idx].copy(), self.log_prior[idx].copy())

    def __len__(self):
        return len(self.log_like)


def mh_iteration(pop: Population, beta: float, loglike_batch: Callable, logprior_fn: Callable,
                 proposal, rngs) -> tuple[Population, np.ndarray]:
    """One Metropolis-Hastings update of every chain; returns the new population and accept flags.

    Each chain draws its proposal and its uniform from its own stream, so
    the outcome does not depend on how the likelihood batch is computed.
    """
    n = len(pop)
    cand = np.empty_like(pop.thetas)
    log_u = np.empty(n)
    for i in range(n):
        cand[i] = proposal.propose(pop.thetas[i], rngs[i])
        log_u[i] = math.log1p(-rngs[i].random())
    lp_new = np.asarray(logprior_fn(cand), dtype=float).reshape(n)
    ll_new = np.asarray(loglike_batch(cand), dtype=float).reshape(n)
    with np.errstate(invalid="ignore"):
        log_ratio = scaled_log_like(beta, ll_new) - scaled_log_like(beta, pop.log_like) + lp_new - pop.log_prior
    accept = np.isfinite(ll_new) & np.isfinite(lp_new) & (log_u < np.nan_to_num(log_ratio, nan=-np.inf))
    out = Population(np.where(accept[:, None], cand, pop.thetas),
                     np.where(accept, ll_new, pop.log_like),
                     np.where(accept, lp_new, pop.log_prior))
    return out, accept


def mh_step(theta, log_like: float, log_prior_val: float, beta: float, loglike_fn: Callable,
            logprior_fn: Callable, proposal, rng) -> tuple[np.ndarray, float, float, bool]:
    """Single-chain MH step (a batch of one through :func:`mh_iteration`)."""
    pop = Population(np.atleast_2d(np.asarray(theta, dtype=float)),
                     np.array([log_like], dtype=float), np.array([log_prior_val], dtype=float))
    out, acc = mh_iteration(pop, beta, lambda c: [loglike_fn(c[0])], lambda c: [logprior_fn(c[0])],
                            proposal, [rng])
    return out.thetas[0], float(out.log_like[0]), float(out.log_prior[0]), bool(acc[0])


def population_correlation(start, current) -> float:
    """Max over parameters of |corr| between sweep-start and current samples.

    A coordinate with zero variance in either population counts as fully
    decorrelated.
    """
    a = start - start.mean(axis=0)
    b = current - current.mean(axis=0)
    num = np.sum(a * b, axis=0)
    den = np.sqrt(np.sum(a * a, axis=0) * np.sum(b * b, axis=0))
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    return float(np.max(np.abs(r)))


@dataclass
class SweepResult:
    population: Population
    iterations: int
    acceptance: float
    correlation: float


def mcmc_sweep(pop: Population, beta: float, loglike_batch, logprior_fn, proposal, rngs,
               correlation_target: float = 0.6, max_iters: int = 100) -> SweepResult:
    start = pop.thetas.copy()
    n_acc, k, corr = 0, 0, 1.0
    while k < max_iters:
        pop, acc = mh_iteration(pop, beta, loglike_batch, logprior_fn, proposal, rngs)
        n_acc += int(acc.sum())
        k += 1
        corr = population_correlation(start, pop.thetas)
        if corr <= correlation_target:
            break
    return SweepResult(pop, k, n_acc / (k * len(pop)), corr)


# ---------------------------------------------------------------- diagnostics

def autocorrelation(chain, max_lag: int) -> np.ndarray:
    """Lag-k autocorrelations, shape (max_lag + 1, d) for a (T, d) chain."""
    x = np.atleast_2d(np.asarray(chain, dtype=float))
    if x.shape[0] == 1:
        x = x.T
    x = x - x.mean(axis=0)
    var = np.sum(x * x, axis=0)
    T = x.shape[0]
    out = np.zeros((max_lag + 1, x.shape[1]))
    for k in range(min(max_lag, T - 1) + 1):
        num = np.sum(x[: T - k] * x[k:], axis=0)
        out[k] = np.where(var > 0, num / np.where(var > 0, var, 1.0), 0.0)
    return np.clip(out, -1.0, 1.0)


def ess_from_autocorrelation(rho) -> np.ndarray:
    """``T / (1 + 2 sum_k rho_k)`` per coordinate, truncating at the first non-positive lag."""
    rho = np.atleast_2d(rho)
    res = []
    for col in rho.T:
        s = 0.0
        for r in col[1:]:
            if r <= 0:
                break
            s += r
        res.append(1.0 / (1.0 + 2.0 * s))
    return np.array(res)


# ---------------------------------------------------------------- driver

@dataclass
class SamplerConfig:
    n_particles: int = 256
    kappa: float = 1.0
    correlation_target: float = 0.6
    max_sweep_iters: int = 100
    accept_target: float = 0.234
    scale_rate: float = 1.0
    initial_scale: float | None = None
    seed: int = 0
    max_levels: int = 10_000

    def __post_init__(self):
        if self.n_particles < 2:
            raise ValueError("need at least two particles")
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")


@dataclass
class Transition:
    """Decision for the next level: new (beta, fidelity) and the weights that get there."""

    beta: float
    fidelity: int
    weights: WeightStats
    log_like: np.ndarray
    decision: str = "temper"
    info: dict = field(default_factory=dict)


@dataclass
class LevelRecord:
    level: int
    beta: float
    fidelity: int
    delta_beta: float
    ess: float
    cov: float
    acceptance: float
    sweep_iters: int
    wall_time: float
    log_c_l: float
    strategy_decision: str = "temper"
    it_criterion_value: float | None = None
    cross_cov: float | None = None
    mean_weight: float | None = None

    def to_json(self) -> str:
        d = {k: (None if isinstance(v, float) and not math.isfinite(v) else v)
             for k, v in asdict(self).items()}
        return json.dumps(d)


@dataclass
class SamplerResult:
    population: Population
    levels: list
    parameter_names: tuple
    log_evidence: float
    log_evidence_sigma: float
    solve_counts: np.ndarray
    top_solves_before_first_bridge: int | None = None

    @property
    def samples(self) -> np.ndarray:
        return self.population.thetas

    def samples_csv(self) -> str:
        lines = [",".join(list(self.parameter_names) + ["log_like", "log_prior"])]
        pop = self.population
        for th, ll, lp in zip(pop.thetas, pop.log_like, pop.log_prior):
            lines.append(",".join(f"{v:.17g}" for v in (*th, ll, lp)))
        return "\n".join(lines) + "\n"

    def level_log(self) -> str:
        return "".join(r.to_json() + "\n" for r in self.levels)


class EvidenceAccumulator:
    """Running sum of per-level log mean weights and their variances."""

    def __init__(self):
        self.log_c: list[float] = []
        self.var: list[float] = []

    def add(self, stats: WeightStats) -> float:
        lc = stats.log_mean
        if not math.isfinite(lc):
            raise SamplerError("non-finite level evidence ratio")
        self.log_c.append(lc)
        self.var.append(stats.mean_variance)
        return lc

    @property
    def log_evidence(self) -> float:
        return float(np.sum(self.log_c)) if self.log_c else 0.0

    @property
    def sigma(self) -> float:
        return float(math.sqrt(np.sum(self.var))) if self.var else 0.0


def level_evidence_ratio(stats: WeightStats) -> tuple[float, float]:
    """(log c_l, variance estimate) for one transition."""
    return stats.log_mean, stats.mean_variance


def total_log_evidence(acc: EvidenceAccumulator) -> tuple[float, float]:
    return acc.log_evidence, acc.sigma


def temper_only(top_level: int, kappa: float):
    """Transition rule of the fixed-fidelity sampler."""

    def choose(state: "AnnealState", like) -> Transition:
        db = tune_delta_beta(state.pop.log_like, state.beta, kappa)
        beta_new = 1.0 if db >= 1.0 - state.beta else state.beta + db
        stats = importance_weights(state.pop.log_like, state.beta, beta_new)
        return Transition(beta_new, top_level, stats, state.pop.log_like, "temper")

    return choose


@dataclass
class AnnealState:
    pop: Population
    beta: float
    fidelity: int
    level: int
    scale: float
    top: int


def run_st_mcmc(like, prior: PriorSpec, cfg: SamplerConfig, choose, start_fidelity: int,
                parameter_names=None, log_path=None, progress: Callable | None = None) -> SamplerResult:
    """Generic tempered sampler; ``choose(state, like) -> Transition`` picks each level.

    ``like`` is a hierarchical likelihood with ``evaluate(thetas, level)``.
    Terminates once beta = 1 at the top fidelity.
    """
    N, d = cfg.n_particles, prior.dim
    top = like.n_levels - 1
    names = tuple(parameter_names) if parameter_names else tuple(f"theta{i}" for i in range(d))
    logprior_fn = lambda th: log_prior(th, prior)  # noqa: E731

    thetas = np.array([prior.sample(1, chain_stream(cfg.seed, 0, i))[0] for i in range(N)])
    ll = like.evaluate(thetas, start_fidelity)
    pop = Population(thetas, ll, np.atleast_1d(logprior_fn(thetas)))
    scale = cfg.initial_scale if cfg.initial_scale is not None else 2.38 / math.sqrt(d)
    state = AnnealState(pop, 0.0, start_fidelity, 0, scale, top)
    evidence = EvidenceAccumulator()
    records: list[LevelRecord] = []
    top_before_bridge = None
    log_file = open(log_path, "w") if log_path else None
    try:
        while not (state.beta >= 1.0 and state.fidelity == top):
            if state.level >= cfg.max_levels:
                raise SamplerError(f"no convergence after {cfg.max_levels} levels")
            t0 = time.perf_counter()
            level = state.level + 1
            try:
                tr = choose(state, like)
            except SamplerError as exc:
                raise SamplerError(f"level {level} (beta={state.beta:.6g}, fidelity={state.fidelity}): {exc}") from exc
            if tr.decision == "bridge" and top_before_bridge is None:
                top_before_bridge = int(like.solve_counts[top])
            log_c = evidence.add(tr.weights)
            cov = adapt_proposal(state.pop.thetas, tr.weights.normalized, state.scale)
            idx = resample(tr.weights, chain_stream(cfg.seed, level, RESAMPLE_STREAM))
            pop = Population(state.pop.thetas, tr.log_like, state.pop.log_prior).take(idx)
            rngs = [chain_stream(cfg.seed, level, i) for i in range(N)]
            fid = tr.fidelity
            sweep = mcmc_sweep(pop, tr.beta, lambda c: like.evaluate(c, fid), logprior_fn,
                               GaussianProposal(cov), rngs, cfg.correlation_target, cfg.max_sweep_iters)
            rec = LevelRecord(
                level=level, beta=tr.beta, fidelity=fid, delta_beta=tr.beta - state.beta,
                ess=tr.weights.ess, cov=tr.weights.cov, acceptance=sweep.acceptance,
                sweep_iters=sweep.iterations, wall_time=time.perf_counter() - t0, log_c_l=log_c,
                strategy_decision=tr.decision, it_criterion_value=tr.info.get("it_criterion"),
                cross_cov=tr.info.get("cross_cov"), mean_weight=float(np.exp(log_c)),
            )
            records.append(rec)
            if log_file:
                log_file.write(rec.to_json() + "\n")
                log_file.flush()
            logger.info("level %d beta=%.4g fidelity=%d ess=%.1f acc=%.3f iters=%d",
                        level, tr.beta, fid, rec.ess, rec.acceptance, rec.sweep_iters)
            if progress:
                progress(rec)
            state = AnnealState(sweep.population, tr.beta, fid, level,
                                update_scale(state.scale, sweep.acceptance, cfg.accept_target, cfg.scale_rate),
                                top)
    finally:
        if log_file:
            log_file.close()
    return SamplerResult(state.pop, records, names, evidence.log_evidence, evidence.sigma,
                         like.solve_counts.copy(), top_before_bridge)


def run_fixed_fidelity(like, prior: PriorSpec, cfg: SamplerConfig, **kw) -> SamplerResult:
    """Classic ST-MCMC on the top fidelity only."""
    top = like.n_levels - 1
    return run_st_mcmc(like, prior, cfg, temper_only(top, cfg.kappa), top, **kw)
