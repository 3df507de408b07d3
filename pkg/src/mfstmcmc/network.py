"""Stochastic reaction networks: species, reactions, propensities and priors.

Parameters are carried in log10 space everywhere; the linear value
``10**theta[i]`` is only formed inside propensity evaluation.  A propensity
reference is either a parameter name (resolved against the network's
parameter list) or a plain number, which is taken as a fixed linear-scale
constant.

Every propensity factorises as ``time_factor(theta, t) * state_factor(x, theta)``.
The state factor never depends on ``t``, so generators of time-varying models
can be assembled once per solve and rescaled per stage.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np
from scipy.special import binom

ParamRef = Union[str, float, int]


class ConfigurationError(ValueError):
    """Raised for malformed model definitions or inconsistent inputs."""


class ModelError(RuntimeError):
    """Raised when a model evaluates to something non-physical."""


def _resolve(ref: ParamRef, theta_lin: dict[str, float]) -> float:
    if isinstance(ref, str):
        try:
            return theta_lin[ref]
        except KeyError:
            raise ConfigurationError(f"unknown parameter reference {ref!r}") from None
    return float(ref)


def _combinatorial(X: np.ndarray, reactants: np.ndarray) -> np.ndarray:
    """Product of binom(x_i, nu_i) over species, vectorised over rows of X."""
    out = np.ones(X.shape[0])
    for i in np.flatnonzero(reactants):
        out *= binom(X[:, i], reactants[i])
        out[X[:, i] < reactants[i]] = 0.0
    return out


@dataclass(frozen=True)
class Signal:
    """Pulse ``S(t) = max(0, exp(-r1 (t - t0)) (1 - exp(-r2 (t - t0))))``."""

    r1: ParamRef
    r2: ParamRef
    t0: ParamRef

    def __call__(self, t: float, theta_lin: dict[str, float]) -> float:
        r1 = _resolve(self.r1, theta_lin)
        r2 = _resolve(self.r2, theta_lin)
        t0 = _resolve(self.t0, theta_lin)
        s = t - t0
        if s <= 0.0:
            return 0.0
        return max(0.0, math.exp(-r1 * s) * (1.0 - math.exp(-r2 * s)))


@dataclass(frozen=True)
class MassAction:
    rate: ParamRef
    kind = "mass_action"
    time_varying = False

    def refs(self):
        return [self.rate]

    def time_factor(self, theta_lin, t):
        return _resolve(self.rate, theta_lin)

    def time_factor_bound(self, theta_lin):
        return _resolve(self.rate, theta_lin)

    def state_factor(self, X, reactants, theta_lin):
        return _combinatorial(X, reactants)


@dataclass(frozen=True)
class Hill:
    """Repression ``k / (1 + a * x_reg**b)`` times the reactant count factor."""

    numerator: ParamRef
    scale: ParamRef
    exponent: ParamRef
    regulator: int
    kind = "hill"
    time_varying = False

    def refs(self):
        return [self.numerator, self.scale, self.exponent]

    def time_factor(self, theta_lin, t):
        return _resolve(self.numerator, theta_lin)

    def time_factor_bound(self, theta_lin):
        return _resolve(self.numerator, theta_lin)

    def state_factor(self, X, reactants, theta_lin):
        a = _resolve(self.scale, theta_lin)
        b = _resolve(self.exponent, theta_lin)
        xr = X[:, self.regulator].astype(float)
        return _combinatorial(X, reactants) / (1.0 + a * np.power(xr, b))


@dataclass(frozen=True)
class TimeVaryingMax:
    """Rate ``max(0, base - coeff * S(t))`` times the reactant count factor."""

    base: ParamRef
    coeff: ParamRef
    signal: Signal
    kind = "time_varying_max"
    time_varying = True

    def refs(self):
        return [self.base, self.coeff, self.signal.r1, self.signal.r2, self.signal.t0]

    def time_factor(self, theta_lin, t):
        a = _resolve(self.base, theta_lin)
        b = _resolve(self.coeff, theta_lin)
        return max(0.0, a - b * self.signal(t, theta_lin))

    def time_factor_bound(self, theta_lin):
        # S(t) lies in [0, 1)
        a = _resolve(self.base, theta_lin)
        b = _resolve(self.coeff, theta_lin)
        return max(0.0, a if b >= 0 else a - b)

    def state_factor(self, X, reactants, theta_lin):
        return _combinatorial(X, reactants)


@dataclass(frozen=True)
class Linear:
    """Weighted species sum ``sum_k w_k x_k`` (e.g. transcription from several gene states)."""

    terms: tuple[tuple[ParamRef, int], ...]
    kind = "linear"
    time_varying = False

    def refs(self):
        return [w for w, _ in self.terms]

    def time_factor(self, theta_lin, t):
        return 1.0

    def time_factor_bound(self, theta_lin):
        return 1.0

    def state_factor(self, X, reactants, theta_lin):
        out = np.zeros(X.shape[0])
        for w, s in self.terms:
            out += _resolve(w, theta_lin) * X[:, s]
        return out


PropensityExpr = Union[MassAction, Hill, TimeVaryingMax, Linear]


@dataclass(frozen=True)
class Reaction:
    reactants: np.ndarray
    products: np.ndarray
    propensity: PropensityExpr
    name: str = ""

    @property
    def net_stoich(self) -> np.ndarray:
        return self.products - self.reactants


def eval_propensity(reaction: Reaction, x, theta_lin: dict[str, float], t: float = 0.0) -> float:
    """Propensity of a single reaction at one state.

    ``theta_lin`` maps parameter names to linear-scale values (see
    :meth:`ReactionNetwork.linear_params`).
    """
    X = np.asarray(x, dtype=np.int64).reshape(1, -1)
    if np.any(X < 0):
        raise ConfigurationError("states must be non-negative")
    prop = reaction.propensity
    val = prop.time_factor(theta_lin, t) * prop.state_factor(X, reaction.reactants, theta_lin)[0]
    if not val >= 0.0:
        raise ModelError(f"negative propensity {val} for reaction {reaction.name!r} at {x}")
    return float(val)


def apply_stoichiometry(x, reaction: Reaction) -> np.ndarray:
    """Return ``x + nu``; the result may be negative and callers must check."""
    return np.asarray(x, dtype=np.int64) + reaction.net_stoich


@dataclass(frozen=True)
class PriorSpec:
    """Independent Gaussians in log10 space."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        std = np.asarray(self.std, dtype=float)
        if mean.shape != std.shape or mean.ndim != 1:
            raise ConfigurationError("prior mean and std must be 1-D of equal length")
        if np.any(std <= 0):
            raise ConfigurationError("prior standard deviations must be positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @property
    def dim(self) -> int:
        return self.mean.size

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.mean + self.std * rng.standard_normal((n, self.dim))


_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def log_prior(theta, prior: PriorSpec) -> np.ndarray | float:
    """Sum of Gaussian log-densities; accepts one vector or a (n, d) batch."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape[-1] != prior.dim:
        raise ConfigurationError(
            f"parameter dimension {theta.shape[-1]} does not match prior dimension {prior.dim}"
        )
    z = (theta - prior.mean) / prior.std
    out = -0.5 * np.sum(z * z, axis=-1) - np.sum(np.log(prior.std)) - prior.dim * _HALF_LOG_2PI
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class ReactionNetwork:
    """Species, reactions and free parameters of an SRN model.

    ``time_offset`` optionally names a parameter whose linear value is added
    to every measurement time when the model is compared with data.
    """

    species: tuple[str, ...]
    reactions: tuple[Reaction, ...]
    parameters: tuple[str, ...]
    time_offset: str | None = None
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(set(self.species)) != len(self.species):
            raise ConfigurationError("species names must be unique")
        if len(set(self.parameters)) != len(self.parameters):
            raise ConfigurationError("parameter names must be unique")
        n = len(self.species)
        known = set(self.parameters)
        for j, r in enumerate(self.reactions):
            for vec, label in ((r.reactants, "reactant"), (r.products, "product")):
                if vec.shape != (n,):
                    raise ConfigurationError(
                        f"reaction {j}: {label} stoichiometry has length {vec.size}, "
                        f"expected {n} (one entry per species)"
                    )
                if np.any(vec < 0):
                    raise ConfigurationError(f"reaction {j}: negative {label} stoichiometry")
            for ref in r.propensity.refs():
                if isinstance(ref, str) and ref not in known:
                    raise ConfigurationError(f"reaction {j}: unknown parameter {ref!r}")
            for s in _species_refs(r.propensity):
                if not 0 <= s < n:
                    raise ConfigurationError(f"reaction {j}: species index {s} out of range")
        if self.time_offset is not None and self.time_offset not in known:
            raise ConfigurationError(f"unknown time offset parameter {self.time_offset!r}")
        object.__setattr__(self, "_index", {p: i for i, p in enumerate(self.parameters)})

    @property
    def n_species(self) -> int:
        return len(self.species)

    @property
    def n_reactions(self) -> int:
        return len(self.reactions)

    @property
    def n_params(self) -> int:
        return len(self.parameters)

    @property
    def stoichiometry(self) -> np.ndarray:
        """Net stoichiometry, shape (n_reactions, n_species)."""
        return np.array([r.net_stoich for r in self.reactions], dtype=np.int64)

    @property
    def reactant_matrix(self) -> np.ndarray:
        return np.array([r.reactants for r in self.reactions], dtype=np.int64)

    @property
    def is_time_varying(self) -> bool:
        return any(r.propensity.time_varying for r in self.reactions)

    def linear_params(self, theta) -> dict[str, float]:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise ConfigurationError(
                f"expected {self.n_params} parameters, got shape {theta.shape}"
            )
        return {p: 10.0 ** theta[i] for i, p in enumerate(self.parameters)}

    def time_shift(self, theta) -> float:
        if self.time_offset is None:
            return 0.0
        return 10.0 ** float(theta[self._index[self.time_offset]])

    def time_factors(self, theta_lin: dict[str, float], t: float) -> np.ndarray:
        return np.array([r.propensity.time_factor(theta_lin, t) for r in self.reactions])

    def time_factor_bounds(self, theta_lin: dict[str, float]) -> np.ndarray:
        """Upper bounds of the time factors over all t (for thinning)."""
        return np.array([r.propensity.time_factor_bound(theta_lin) for r in self.reactions])

    def state_factors(self, X: np.ndarray, theta_lin: dict[str, float]) -> np.ndarray:
        """State-dependent propensity parts, shape (n_states, n_reactions)."""
        X = np.asarray(X)
        out = np.empty((X.shape[0], self.n_reactions))
        for j, r in enumerate(self.reactions):
            out[:, j] = r.propensity.state_factor(X, r.reactants, theta_lin)
        return out

    def propensities(self, X: np.ndarray, theta_lin: dict[str, float], t: float = 0.0) -> np.ndarray:
        """All propensities at the rows of X, shape (n_states, n_reactions)."""
        P = self.state_factors(X, theta_lin) * self.time_factors(theta_lin, t)
        if np.any(P < 0) or np.any(np.isnan(P)):
            bad = np.argwhere(~(P >= 0))[0]
            raise ModelError(
                f"invalid propensity {P[tuple(bad)]} for reaction {bad[1]} at state {X[bad[0]]}"
            )
        return P


def _species_refs(prop) -> list[int]:
    if isinstance(prop, Hill):
        return [prop.regulator]
    if isinstance(prop, Linear):
        return [s for _, s in prop.terms]
    return []


def make_reaction(n_species: int, reactants: dict[int, int] | Sequence[int],
                  products: dict[int, int] | Sequence[int], propensity: PropensityExpr,
                  name: str = "") -> Reaction:
    """Build a reaction from dense vectors or sparse ``{species: count}`` maps."""

    def dense(v):
        if isinstance(v, dict):
            out = np.zeros(n_species, dtype=np.int64)
            for k, c in v.items():
                out[k] = c
            return out
        return np.asarray(v, dtype=np.int64)

    return Reaction(dense(reactants), dense(products), propensity, name)
