"""scikit-learn style front end to the multifidelity sampler."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .fsp import solve_cme_adaptive
from .integrate import IntegratorConfig
from .likelihood import CMELikelihood, ModelHierarchy, marginal_lookup
from .multifi import STRATEGIES, BridgingStrategy, run_multifidelity
from .network import ConfigurationError, PriorSpec, ReactionNetwork
from .stmcmc import SamplerConfig
from .validation import check_dataset, check_positive_float, check_positive_int, check_times


class MultifidelitySampler(BaseEstimator):
    """Posterior sampling of reaction-network parameters from snapshot data.

    ``fit(dataset)`` runs the sampler and stores ``samples_`` (log10
    parameters), ``log_evidence_`` and ``log_evidence_sigma_``.
    """

    def __init__(self, network: ReactionNetwork = None, prior: PriorSpec = None, initial_state=None,
                 hierarchy: ModelHierarchy = None, strategy: str = "tuned-it", n_particles: int = 256,
                 kappa: float = 1.0, kappa_bridge: float = 1.0, kappa_cross: float = 1.0,
                 correlation_target: float = 0.6, max_sweep_iters: int = 100, n_it=None,
                 seed: int = 0, workers: int = 1, integrator: IntegratorConfig = None):
        self.network = network
        self.prior = prior
        self.initial_state = initial_state
        self.hierarchy = hierarchy
        self.strategy = strategy
        self.n_particles = n_particles
        self.kappa = kappa
        self.kappa_bridge = kappa_bridge
        self.kappa_cross = kappa_cross
        self.correlation_target = correlation_target
        self.max_sweep_iters = max_sweep_iters
        self.n_it = n_it
        self.seed = seed
        self.workers = workers
        self.integrator = integrator

    def _validate_params(self):
        if not isinstance(self.network, ReactionNetwork):
            raise ConfigurationError("network must be a ReactionNetwork")
        if not isinstance(self.prior, PriorSpec) or self.prior.dim != len(self.network.parameters):
            raise ConfigurationError("prior must be a PriorSpec with one entry per network parameter")
        if not isinstance(self.hierarchy, ModelHierarchy):
            raise ConfigurationError("hierarchy must be a ModelHierarchy")
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(f"strategy must be one of {STRATEGIES}")
        check_positive_int(self.n_particles, "n_particles", 2)
        check_positive_int(self.max_sweep_iters, "max_sweep_iters")
        check_positive_int(self.workers, "workers")
        for name in ("kappa", "kappa_bridge", "kappa_cross", "correlation_target"):
            check_positive_float(getattr(self, name), name)

    def fit(self, X, y=None):
        self._validate_params()
        data = check_dataset(X, self.network)
        init = self.initial_state if self.initial_state is not None else (0,) * self.network.n_species
        cfg = SamplerConfig(n_particles=self.n_particles, kappa=self.kappa,
                            correlation_target=self.correlation_target,
                            max_sweep_iters=self.max_sweep_iters, seed=self.seed)
        like = CMELikelihood(self.network, data, self.hierarchy, init,
                             self.integrator or IntegratorConfig(), workers=self.workers)
        try:
            res = run_multifidelity(like, self.prior, cfg,
                                    BridgingStrategy(self.strategy, self.kappa_bridge, self.kappa_cross,
                                                     self.n_it),
                                    parameter_names=self.network.parameters)
        finally:
            like.close()
        self.result_ = res
        self.samples_ = res.samples.copy()
        self.log_evidence_ = res.log_evidence
        self.log_evidence_sigma_ = res.log_evidence_sigma
        self.levels_ = list(res.levels)
        self.solve_counts_ = res.solve_counts.copy()
        self.observed_species_ = data.observed_species
        self.n_features_in_ = len(self.network.parameters)
        return self

    def posterior_mean(self) -> np.ndarray:
        check_is_fitted(self, "samples_")
        return self.samples_.mean(axis=0)

    def posterior_std(self) -> np.ndarray:
        check_is_fitted(self, "samples_")
        return self.samples_.std(axis=0)

    def predict(self, times, n_draws: int = 20, eps: float = 1e-8):
        """Posterior-predictive distributions of the observed species.

        Averages top-fidelity CME solutions over ``n_draws`` evenly spaced
        posterior samples; returns ``(states, probs)`` with ``probs`` of shape
        (len(times), len(states)).
        """
        check_is_fitted(self, "samples_")
        times = check_times(times)
        n_draws = check_positive_int(n_draws, "n_draws")
        idx = np.unique(np.linspace(0, len(self.samples_) - 1, n_draws).round().astype(int))
        obs = list(self.observed_species_)
        b = self.hierarchy.bound(self.hierarchy.n_levels - 1)
        grids = np.meshgrid(*[np.arange(b[s] + 1) for s in obs], indexing="ij")
        query = np.stack([g.ravel() for g in grids], axis=1)
        init = self.initial_state if self.initial_state is not None else (0,) * self.network.n_species
        acc = np.zeros((times.size, len(query)))
        for i in idx:
            th = self.samples_[i]
            shift = self.network.time_shift(th)
            sol = solve_cme_adaptive(self.network, th, times + shift, eps, b, init,
                                     self.integrator or IntegratorConfig())
            for k, pv in enumerate(sol.distributions):
                acc[k] += marginal_lookup(pv.states, pv.p, obs, query)
        return query, acc / len(idx)
