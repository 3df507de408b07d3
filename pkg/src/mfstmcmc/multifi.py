"""Multifidelity tempering: choosing between tempering and bridging at each level.

Strategies:

* ``full``: temper on the top fidelity only.
* ``ess``: bridge when the weights of a hypothetical bridge at the current
  beta have COV above ``kappa_bridge``.
* ``it``: propose a tempering step on the current fidelity and bridge when
  the information it would carry about the top-fidelity posterior is
  negative; beta is left unchanged at a bridge.
* ``tuned-it``: as ``it`` but beta is re-tuned at a bridge against
  ``kappa_cross``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass

import numpy as np

from .network import PriorSpec
from .stmcmc import (
    AnnealState,
    EvidenceAccumulator,
    SamplerConfig,
    SamplerError,
    SamplerResult,
    Transition,
    cov_of_log_weights,
    importance_weights,
    level_evidence_ratio,
    run_st_mcmc,
    scaled_log_like,
    total_log_evidence,
    tune_delta_beta,
)

logger = logging.getLogger(__name__)

STRATEGIES = ("full", "ess", "it", "tuned-it")
# ties at COV == kappa resolve toward tempering despite rounding in the weights
_TIE_RTOL = 1e-12


@dataclass(frozen=True)
class BridgingStrategy:
    kind: str = "tuned-it"
    kappa_bridge: float = 1.0
    kappa_cross: float = 1.0
    n_it: int | None = None

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.kind!r}; choose from {STRATEGIES}")
        if self.kappa_bridge <= 0 or self.kappa_cross <= 0:
            raise ValueError("kappa values must be positive")


def ess_bridge_decide(ll_m, ll_next, beta: float, kappa: float) -> tuple[str, float]:
    """('bridge' | 'temper', COV of the hypothetical bridging weights)."""
    lw = scaled_log_like(beta, ll_next) - scaled_log_like(beta, ll_m)
    lw = np.where(np.isnan(lw), -np.inf, lw)
    cov = cov_of_log_weights(lw)
    return ("bridge" if cov > kappa * (1.0 + _TIE_RTOL) else "temper"), cov


def _finite_pairs(ll_m, ll_top):
    ll_m = np.asarray(ll_m, dtype=float)
    ll_top = np.asarray(ll_top, dtype=float)
    if ll_m.shape != ll_top.shape:
        raise ValueError("log-likelihood vectors must have equal length")
    ok = np.isfinite(ll_m) & np.isfinite(ll_top)
    if not ok.all():
        if not ok.any():
            raise SamplerError("no particle has finite likelihoods at both fidelities")
        logger.warning("excluding %d particles with infinite log-likelihood from the IT criterion",
                       int((~ok).sum()))
    return ll_m[ok], ll_top[ok]


def it_criterion(ll_m, ll_top, beta: float, delta_beta: float) -> float:
    """Sign-carrying estimate of the information a tempering step gives about the top posterior.

    With ``r_i = exp(L_top - beta L_m)`` (max-normalised) and ``x_i = delta_beta L_m``
    this is ``sum r_i x_i - (sum r_i) log mean exp(x)``, evaluated as
    ``sum r_i (x_i - logmeanexp(x))`` for accuracy.
    """
    lm, lt = _finite_pairs(ll_m, ll_top)
    log_r = lt - scaled_log_like(beta, lm)
    r = np.exp(log_r - log_r.max())
    x = delta_beta * lm
    # max-shifted mean keeps a constant surrogate at exactly zero
    m = x.max()
    lme = m + math.log(np.mean(np.exp(x - m)))
    return float(np.sum(r * (x - lme)))


def _cross_log_weights(beta_new, ll_next, beta, ll_m):
    a = scaled_log_like(beta_new, ll_next)
    b = scaled_log_like(beta, ll_m)
    with np.errstate(invalid="ignore"):
        lw = a - b
    # particles impossible under the current level carry no weight
    return np.where(np.isfinite(b) & ~np.isnan(lw), lw, -np.inf)


def tune_beta_cross_fidelity(ll_m, ll_next, beta: float, kappa_cross: float,
                             grid_step: float = 1e-3) -> tuple[float, float]:
    """Beta for a bridge to the next fidelity, and the COV it gives.

    Returns the largest beta' in [0, 1] whose weights meet COV <= kappa_cross
    (refined by bisection to the crossing), else the grid point of least COV.
    """
    n_grid = int(round(1.0 / grid_step)) + 1
    grid = np.linspace(0.0, 1.0, n_grid)

    def cov(bp):
        return cov_of_log_weights(_cross_log_weights(bp, ll_next, beta, ll_m))

    covs = np.array([cov(g) for g in grid])
    ok = covs <= kappa_cross
    if not ok.any():
        j = int(np.argmin(covs))
        return float(grid[j]), float(covs[j])
    j = int(np.flatnonzero(ok)[-1])
    if j == n_grid - 1:
        return 1.0, float(covs[j])
    lo, hi = grid[j], grid[j + 1]
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if cov(mid) <= kappa_cross:
            lo = mid
        else:
            hi = mid
    return float(lo), cov(lo)


def _it_subset(n: int, n_it: int | None) -> np.ndarray:
    if n_it is None or n_it >= n:
        return np.arange(n)
    return np.unique(np.linspace(0, n - 1, n_it).round().astype(int))


def _temper(state: AnnealState, kappa: float, info=None, db=None) -> Transition:
    ll = state.pop.log_like
    if db is None:
        db = tune_delta_beta(ll, state.beta, kappa)
    beta_new = 1.0 if db >= 1.0 - state.beta else state.beta + db
    return Transition(beta_new, state.fidelity, importance_weights(ll, state.beta, beta_new), ll,
                      "temper", info or {})


def _bridge(state: AnnealState, ll_next, beta_new: float, info=None) -> Transition:
    stats = importance_weights(state.pop.log_like, state.beta, beta_new, ll_next)
    return Transition(beta_new, state.fidelity + 1, stats, np.asarray(ll_next, dtype=float),
                      "bridge", info or {})


def make_chooser(strategy: BridgingStrategy, kappa: float):
    """Transition rule ``choose(state, like) -> Transition`` for a strategy."""

    def choose(state: AnnealState, like) -> Transition:
        m, top, beta = state.fidelity, state.top, state.beta
        if m >= top or strategy.kind == "full":
            return _temper(state, kappa)
        thetas, ll_m = state.pop.thetas, state.pop.log_like
        if strategy.kind == "ess":
            ll_next = like.evaluate(thetas, m + 1)
            decision, cov = ess_bridge_decide(ll_m, ll_next, beta, strategy.kappa_bridge)
            if decision == "bridge" or beta >= 1.0:
                return _bridge(state, ll_next, beta, {"cross_cov": cov})
            return _temper(state, kappa, {"cross_cov": cov})
        # information-theoretic strategies
        if beta >= 1.0:
            db, crit = 0.0, -math.inf
        else:
            db = tune_delta_beta(ll_m, beta, kappa)
            sub = _it_subset(len(ll_m), strategy.n_it)
            ll_top = like.evaluate(thetas[sub], top)
            crit = it_criterion(ll_m[sub], ll_top, beta, db)
        info = {"it_criterion": crit}
        if crit >= 0.0:
            return _temper(state, kappa, info, db)
        ll_next = like.evaluate(thetas, m + 1)
        if strategy.kind == "tuned-it":
            beta_new, cov = tune_beta_cross_fidelity(ll_m, ll_next, beta, strategy.kappa_cross)
            info["cross_cov"] = cov
        else:
            beta_new = beta
        return _bridge(state, ll_next, beta_new, info)

    return choose


def select_next_level(strategy: BridgingStrategy, state: AnnealState, like, kappa: float = 1.0) -> Transition:
    return make_chooser(strategy, kappa)(state, like)


def run_multifidelity(like, prior: PriorSpec, cfg: SamplerConfig,
                      strategy: BridgingStrategy | str = "tuned-it", **kw) -> SamplerResult:
    """Multifidelity tempered sampler ending at the top-fidelity posterior."""
    if isinstance(strategy, str):
        strategy = BridgingStrategy(strategy)
    start = like.n_levels - 1 if strategy.kind == "full" else 0
    return run_st_mcmc(like, prior, cfg, make_chooser(strategy, cfg.kappa), start, **kw)


def run_report(result: SamplerResult, strategy: str, extra: dict | None = None) -> dict:
    counts = [int(c) for c in result.solve_counts]
    rep = {
        "format_version": 1,
        "strategy": strategy,
        "log_evidence": result.log_evidence,
        "log_evidence_sigma": result.log_evidence_sigma,
        "levels": len(result.levels),
        "full_model_solves": counts[-1],
        "per_fidelity_solve_counts": counts,
        "top_solves_before_first_bridge": result.top_solves_before_first_bridge,
        "final_beta": result.levels[-1].beta if result.levels else 1.0,
        "final_fidelity": result.levels[-1].fidelity if result.levels else len(counts) - 1,
    }
    if extra:
        rep.update(extra)
    return rep


__all__ = [
    "BridgingStrategy",
    "EvidenceAccumulator",
    "STRATEGIES",
    "ess_bridge_decide",
    "it_criterion",
    "level_evidence_ratio",
    "make_chooser",
    "run_multifidelity",
    "run_report",
    "select_next_level",
    "total_log_evidence",
    "tune_beta_cross_fidelity",
]
