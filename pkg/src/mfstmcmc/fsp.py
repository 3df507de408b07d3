"""Finite state projection of surrogate chemical master equations.

A fidelity bound ``b`` caps every species; propensities vanish once any
count exceeds its cap, so those exterior states are absorbing and never need
to be stored.  Inside the box ``H(b)`` the solver keeps only an adaptively
grown subset ``Omega`` of states defined by linear constraints
``W @ x <= c``.

Both kinds of lost probability are tracked with two absorbing sink entries
appended to the state vector:

* the *frozen* sink collects mass that leaves ``H(b)``; this is part of the
  surrogate model itself,
* the *truncation* sink collects mass flowing from ``Omega`` into
  ``H(b) \\ Omega``; this is the adaptive solver's error and is what the
  error budget ``g(t) <= (t / t_f) * eps`` controls.

``1 - sum(p)`` equals the sum of both sinks.
"""

from __future__ import annotations

import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .integrate import IntegratorConfig, KrylovStepper, RosenbrockStepper
from .network import ReactionNetwork

logger = logging.getLogger(__name__)

DEFAULT_MAX_STATES = 2_000_000


class CapacityError(RuntimeError):
    """The state set needed for a solve does not fit in the configured cap."""

    def __init__(self, message: str, theta=None):
        super().__init__(message)
        self.theta = None if theta is None else np.asarray(theta).copy()


def as_bound(b) -> np.ndarray:
    b = np.atleast_1d(np.asarray(b, dtype=np.int64))
    if b.ndim != 1 or np.any(b < 1):
        raise ValueError(f"fidelity bound entries must be >= 1, got {b}")
    return b


def _strides(b: np.ndarray) -> np.ndarray:
    radix = b + 1
    strides = np.ones_like(radix)
    for i in range(len(b) - 2, -1, -1):
        strides[i] = strides[i + 1] * radix[i + 1]
    return strides


@dataclass(eq=False)
class StateSpace:
    """An ordered, duplicate-free set of states inside ``H(bound)``.

    States are identified by their mixed-radix rank in ``H(bound)``, which
    coincides with lexicographic order.  New states are always appended, so
    ordinals of existing states never change.
    """

    states: np.ndarray
    bound: np.ndarray
    weights: np.ndarray = None
    thresholds: np.ndarray = None
    _keys: np.ndarray = field(init=False, repr=False)
    _order: np.ndarray = field(init=False, repr=False)
    _pattern: object = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.states = np.ascontiguousarray(self.states, dtype=np.int64).reshape(-1, len(self.bound))
        self.bound = as_bound(self.bound)
        n_sp = len(self.bound)
        if self.weights is None:
            self.weights = np.zeros((0, n_sp), dtype=np.int64)
            self.thresholds = np.zeros(0)
        self.weights = np.asarray(self.weights)
        self.thresholds = np.asarray(self.thresholds, dtype=float)
        self._strides = _strides(self.bound)
        keys = self.encode(self.states)
        self._order = np.argsort(keys, kind="stable")
        self._keys = keys[self._order]
        if np.any(np.diff(self._keys) == 0):
            raise ValueError("duplicate states in state space")

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def n_species(self) -> int:
        return len(self.bound)

    def encode(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X, dtype=np.int64) @ self._strides

    def in_box(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X)
        return np.all((X >= 0) & (X <= self.bound), axis=-1)

    def satisfies(self, X: np.ndarray) -> np.ndarray:
        ok = self.in_box(X)
        if self.weights.shape[0]:
            ok &= np.all(X @ self.weights.T <= self.thresholds + 1e-9, axis=-1)
        return ok

    def index_of(self, X) -> np.ndarray:
        """Ordinals of the rows of X, -1 where a row is not in the space."""
        X = np.atleast_2d(np.asarray(X, dtype=np.int64))
        out = np.full(X.shape[0], -1, dtype=np.int64)
        inbox = self.in_box(X)
        if not inbox.any() or len(self) == 0:
            return out
        keys = self.encode(X[inbox])
        pos = np.searchsorted(self._keys, keys)
        pos = np.minimum(pos, len(self._keys) - 1)
        hit = self._keys[pos] == keys
        idx = np.where(hit, self._order[pos], -1)
        out[inbox] = idx
        return out

    def key(self) -> tuple:
        return (tuple(self.bound), tuple(map(tuple, self.weights)), tuple(self.thresholds), len(self))


def build_rectangle_space(b, max_states: int = DEFAULT_MAX_STATES) -> StateSpace:
    """All states of ``H(b)`` in lexicographic order."""
    b = as_bound(b)
    size = int(np.prod(b + 1, dtype=object))
    if size > max_states:
        raise CapacityError(f"H(b) has {size} states, exceeding the cap of {max_states}")
    grids = np.meshgrid(*[np.arange(bi + 1) for bi in b], indexing="ij")
    states = np.stack([g.ravel() for g in grids], axis=1)
    return StateSpace(states, b)


def default_constraints(n_species: int) -> np.ndarray:
    """Coordinate caps ``x_i <= c_i`` plus the total count ``sum x <= c``."""
    return np.vstack([np.eye(n_species, dtype=np.int64), np.ones((1, n_species), dtype=np.int64)])


def _successors(X: np.ndarray, stoich: np.ndarray, reactants: np.ndarray) -> np.ndarray:
    """States reachable in one reaction from the rows of X (reactant-feasible only)."""
    out = []
    for nu, r in zip(stoich, reactants):
        feasible = np.all(X >= r, axis=1)
        if feasible.any():
            out.append(X[feasible] + nu)
    if not out:
        return np.zeros((0, X.shape[1]), dtype=np.int64)
    return np.vstack(out)


def _explore(space_states: np.ndarray, frontier: np.ndarray, probe: StateSpace,
             stoich, reactants, max_states: int, theta=None) -> np.ndarray:
    """Breadth-first search for new states satisfying ``probe`` constraints."""
    known = np.sort(probe.encode(space_states))
    new_blocks = []
    total = len(space_states)
    while frontier.shape[0]:
        cand = _successors(frontier, stoich, reactants)
        cand = cand[probe.satisfies(cand)] if cand.shape[0] else cand
        if not cand.shape[0]:
            break
        keys, first = np.unique(probe.encode(cand), return_index=True)
        pos = np.searchsorted(known, keys)
        pos = np.minimum(pos, max(len(known) - 1, 0))
        fresh = known[pos] != keys if len(known) else np.ones(len(keys), bool)
        frontier = cand[first[fresh]]
        if not frontier.shape[0]:
            break
        total += frontier.shape[0]
        if total > max_states:
            raise CapacityError(f"state set exceeds the cap of {max_states} states", theta)
        new_blocks.append(frontier)
        known = np.sort(np.concatenate([known, keys[fresh]]))
    if not new_blocks:
        return np.zeros((0, space_states.shape[1]), dtype=np.int64)
    return np.vstack(new_blocks)


def initial_space(net: ReactionNetwork, init_states, b, weights=None,
                  max_states: int = DEFAULT_MAX_STATES) -> StateSpace:
    """Starting set: thresholds cover the initial support plus one reaction step."""
    b = as_bound(b)
    init_states = np.atleast_2d(np.asarray(init_states, dtype=np.int64))
    if weights is None:
        weights = default_constraints(net.n_species)
    box = StateSpace(np.zeros((0, len(b)), dtype=np.int64), b)
    if not np.all(box.in_box(init_states)):
        raise ValueError("initial distribution must be supported inside H(b)")
    step = _successors(init_states, net.stoichiometry, net.reactant_matrix)
    step = step[box.in_box(step)] if step.shape[0] else step
    cover = np.vstack([init_states, step])
    thresholds = np.max(cover @ np.asarray(weights).T, axis=0).astype(float)
    thresholds = np.maximum(thresholds, 1.0)
    seed = init_states[np.unique(box.encode(init_states), return_index=True)[1]]
    probe = StateSpace(np.zeros((0, len(b)), dtype=np.int64), b, weights, thresholds)
    new = _explore(seed, seed, probe, net.stoichiometry, net.reactant_matrix, max_states)
    return StateSpace(np.vstack([seed, new]), b, weights, thresholds)


def expand_state_set(space: StateSpace, growth_factor: float, net: ReactionNetwork,
                     max_states: int = DEFAULT_MAX_STATES, theta=None) -> StateSpace:
    """Relax every threshold by ``growth_factor`` and add newly reachable states."""
    if not growth_factor > 1.0:
        raise ValueError("growth_factor must exceed 1")
    integer = np.all(np.equal(np.mod(space.weights, 1), 0), axis=1)
    c = space.thresholds * growth_factor
    c = np.where(integer, np.maximum(np.ceil(c - 1e-9), space.thresholds + 1), c)
    # thresholds beyond what H(b) can reach are pinned to keep keys stable
    cap = np.maximum(space.weights, 0) @ space.bound
    c = np.minimum(c, np.maximum(cap, space.thresholds))
    probe = StateSpace(np.zeros((0, space.n_species), dtype=np.int64), space.bound, space.weights, c)
    new = _explore(space.states, space.states, probe, net.stoichiometry, net.reactant_matrix,
                   max_states, theta)
    if not new.shape[0] and np.array_equal(c, space.thresholds):
        return space
    return StateSpace(np.vstack([space.states, new]), space.bound, space.weights, c)


class _Pattern:
    """Sparsity pattern of the sink-augmented generator on a fixed space.

    Entries are indexed by (state, reaction); assembling the matrix for new
    propensities is a single weighted bincount.
    """

    def __init__(self, space: StateSpace, net: ReactionNetwork):
        n, M = len(space), net.n_reactions
        X = space.states
        rows, cols, src, rxn, sign = [], [], [], [], []
        all_idx = np.arange(n)
        for j, nu in enumerate(net.stoichiometry):
            Y = X + nu
            dst = space.index_of(Y)
            inside = space.in_box(Y)
            ins = dst >= 0
            frozen = ~inside
            trunc = inside & ~ins
            for mask, r in ((ins, dst[ins]), (frozen, np.full(frozen.sum(), n)),
                            (trunc, np.full(trunc.sum(), n + 1))):
                rows.append(r)
                cols.append(all_idx[mask])
                src.append(all_idx[mask])
                rxn.append(np.full(mask.sum(), j))
                sign.append(np.ones(mask.sum()))
            rows.append(all_idx)
            cols.append(all_idx)
            src.append(all_idx)
            rxn.append(np.full(n, j))
            sign.append(-np.ones(n))
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        self.src = np.concatenate(src)
        self.rxn = np.concatenate(rxn)
        self.sign = np.concatenate(sign)
        size = n + 2
        lin = rows * size + cols
        uniq, self.inverse = np.unique(lin, return_inverse=True)
        self.indices = (uniq % size).astype(np.int32)
        counts = np.bincount(uniq // size, minlength=size)
        self.indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int32)
        self.nnz = len(uniq)
        self.size = size
        self.n = n

    def matrix(self, P: np.ndarray) -> sp.csr_matrix:
        """Augmented generator for propensity table P of shape (n, M)."""
        vals = self.sign * P[self.src, self.rxn]
        data = np.bincount(self.inverse, weights=vals, minlength=self.nnz)
        return sp.csr_matrix((data, self.indices, self.indptr), shape=(self.size, self.size))


def _pattern(space: StateSpace, net: ReactionNetwork) -> _Pattern:
    if space._pattern is None or space._pattern[0] is not net:
        space._pattern = (net, _Pattern(space, net))
    return space._pattern[1]


@dataclass
class SparseGenerator:
    """CME generator on a state space, with per-state outflow bookkeeping.

    ``matrix`` is the n x n operator; its column deficits are split into
    ``frozen_outflow`` (leaving H(b)) and ``truncated_outflow`` (reaching
    states of H(b) outside the space).
    """

    matrix: sp.csr_matrix
    frozen_outflow: np.ndarray
    truncated_outflow: np.ndarray

    @property
    def augmented(self) -> sp.csr_matrix:
        n = self.matrix.shape[0]
        sinks = sp.csr_matrix(np.vstack([self.frozen_outflow, self.truncated_outflow]))
        top = sp.hstack([self.matrix, sp.csr_matrix((n, 2))])
        bottom = sp.hstack([sinks, sp.csr_matrix((2, 2))])
        return sp.vstack([top, bottom]).tocsr()


def assemble_generator(net: ReactionNetwork, theta, space: StateSpace, b=None,
                       t: float = 0.0) -> SparseGenerator:
    """Surrogate CME generator at time t on ``space`` (which lives inside H(b))."""
    if b is not None and not np.array_equal(as_bound(b), space.bound):
        raise ValueError("space was built for a different fidelity bound")
    lin = net.linear_params(theta)
    P = net.propensities(space.states, lin, t)
    A = _pattern(space, net).matrix(P)
    n = len(space)
    A = A.tocsr()
    return SparseGenerator(A[:n, :n], A[n, :n].toarray().ravel(), A[n + 1, :n].toarray().ravel())


def fsp_error_mass(p) -> float:
    """Probability missing from p, i.e. the l1 distance to the untruncated solution."""
    return float(1.0 - np.sum(p))


@dataclass
class ProbabilityVector:
    states: np.ndarray
    p: np.ndarray
    time: float
    truncation_error: float = 0.0
    frozen_mass: float = 0.0

    @property
    def error(self) -> float:
        return fsp_error_mass(self.p)

    def marginal(self, species) -> tuple[np.ndarray, np.ndarray]:
        """Distribution of the given species coordinates (unique rows, probabilities)."""
        sub = self.states[:, list(species)]
        uniq, inv = np.unique(sub, axis=0, return_inverse=True)
        return uniq, np.bincount(inv.ravel(), weights=self.p, minlength=len(uniq))

    def to_csv_rows(self, species_names):
        yield list(species_names) + ["probability"]
        for x, q in zip(self.states, self.p):
            yield [int(v) for v in x] + [repr(float(q))]


@dataclass
class FSPSolution:
    distributions: list
    space: StateSpace
    checkpoints: list = field(default_factory=list)
    expansions: int = 0
    steps: int = 0

    def __getitem__(self, i):
        return self.distributions[i]

    def __len__(self):
        return len(self.distributions)


def normalize_initial(init, n_species: int) -> tuple[np.ndarray, np.ndarray]:
    """Accept a single state, a dict {state: prob}, or a (states, probs) pair."""
    if isinstance(init, dict):
        states = np.array([list(k) for k in init], dtype=np.int64)
        probs = np.array(list(init.values()), dtype=float)
    elif isinstance(init, tuple) and len(init) == 2 and np.ndim(init[0]) == 2:
        states = np.asarray(init[0], dtype=np.int64)
        probs = np.asarray(init[1], dtype=float)
    else:
        states = np.asarray(init, dtype=np.int64).reshape(1, n_species)
        probs = np.ones(1)
    if states.shape[1] != n_species:
        raise ValueError(f"initial states must have {n_species} coordinates")
    if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-12:
        raise ValueError("initial probabilities must be non-negative and sum to 1")
    return states, probs


class _SpaceCache:
    """Per-process LRU cache of state spaces keyed by their defining thresholds."""

    def __init__(self, size: int = 64):
        self.size = size
        self._d: OrderedDict = OrderedDict()

    def get(self, owner, key, build):
        # the owner is stored with the value so its id() cannot be recycled
        key = (id(owner),) + key
        hit = self._d.get(key)
        if hit is not None and hit[0] is owner:
            self._d.move_to_end(key)
            return hit[1]
        val = build()
        self._d[key] = (owner, val)
        if len(self._d) > self.size:
            self._d.popitem(last=False)
        return val

    def clear(self):
        self._d.clear()


SPACE_CACHE = _SpaceCache()


def _grown(space, growth, net, max_states, theta):
    key = ("grow", space.key(), growth)
    return SPACE_CACHE.get(net, key, lambda: expand_state_set(space, growth, net, max_states, theta))


def solve_cme_adaptive(net: ReactionNetwork, theta, times, eps: float, b, init,
                       cfg: IntegratorConfig = IntegratorConfig(), growth_factor: float = 1.5,
                       max_states: int = DEFAULT_MAX_STATES, weights=None) -> FSPSolution:
    """Solve the surrogate CME M(b) at the requested times with adaptive state sets.

    At every accepted integrator checkpoint ``t`` the mass lost to states of
    ``H(b)`` outside the current set is at most ``(t / t_f) * eps``; a
    violating step is discarded, the set is expanded and the step retried.
    Raises :class:`CapacityError` when the set would exceed ``max_states``.
    """
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or times.size == 0:
        raise ValueError("times must be a non-empty 1-D sequence")
    if np.any(np.diff(times) <= 0) or times[0] < 0:
        raise ValueError("times must be non-negative and strictly increasing")
    if not eps > 0:
        raise ValueError("eps must be positive")
    b = as_bound(b)
    if len(b) != net.n_species:
        raise ValueError(f"bound has {len(b)} entries, network has {net.n_species} species")
    init_states, init_probs = normalize_initial(init, net.n_species)
    lin = net.linear_params(theta)
    t_f = float(times[-1])

    key = ("init", tuple(b), init_states.tobytes(),
           None if weights is None else np.asarray(weights).tobytes())
    space = SPACE_CACHE.get(net, key, lambda: initial_space(net, init_states, b, weights, max_states))
    if len(space) > max_states:
        raise CapacityError("initial state set exceeds the cap", theta)

    w = np.zeros(len(space) + 2)
    w[space.index_of(init_states)] = init_probs

    time_varying = net.is_time_varying
    state_factors = None

    def setup(space):
        nonlocal state_factors
        pat = _pattern(space, net)
        if time_varying:
            state_factors = net.state_factors(space.states, lin)
            if np.any(state_factors < 0) or np.any(np.isnan(state_factors)):
                raise ValueError("negative state factor in propensity")

            def A_of_t(t):
                return pat.matrix(state_factors * net.time_factors(lin, t))

            return RosenbrockStepper(A_of_t, cfg)
        return KrylovStepper(pat.matrix(net.propensities(space.states, lin, 0.0)), cfg)

    stepper = setup(space)
    out, checkpoints = [], []
    t, k, steps, expansions = 0.0, 0, 0, 0
    while k < len(times):
        T = float(times[k])
        while t < T:
            if time_varying:
                w_new, h = stepper.step(w, t, T - t)
            else:
                w_new, h = stepper.step(w, T - t)
            steps += 1
            t_new = T if T - (t + h) <= 1e-12 * max(1.0, T) else t + h
            g = w_new[-1]
            budget = t_new / t_f * eps
            if g > budget:
                grown = _grown(space, growth_factor, net, max_states, theta)
                if len(grown) > len(space):
                    expansions += 1
                    hint = stepper.h_next
                    pad = np.zeros(len(grown) - len(space))
                    w = np.concatenate([w[:-2], pad, w[-2:]])
                    space = grown
                    stepper = setup(space)
                    stepper.h_next = hint
                    continue
                if grown is not space:
                    space = grown
                    stepper = setup(space)
                    continue
                logger.debug("truncation error %.3g above budget %.3g with a saturated state set",
                             g, budget)
            checkpoints.append((t_new, float(g), budget))
            t, w = t_new, w_new
        n = len(space)
        out.append(ProbabilityVector(space.states.copy(), w[:n].copy(), T,
                                     truncation_error=float(w[-1]), frozen_mass=float(w[-2])))
        k += 1
    return FSPSolution(out, space, checkpoints, expansions, steps)
