"""Snapshot data, fidelity hierarchies and surrogate log-likelihoods."""

from __future__ import annotations

import logging
import math
import os
from collections import OrderedDict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
import multiprocessing as mp

import numpy as np

from .fsp import DEFAULT_MAX_STATES, CapacityError, as_bound, solve_cme_adaptive
from .integrate import IntegratorConfig, IntegratorError
from .network import ReactionNetwork

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-300


@dataclass
class SnapshotDataset:
    """Independent single-cell snapshots.

    ``cells[i]`` is an integer array of shape (n_i, len(observed_species))
    holding the observed copy numbers of every cell measured at ``times[i]``.
    """

    times: np.ndarray
    cells: list
    observed_species: tuple

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        if self.times.ndim != 1 or np.any(np.diff(self.times) <= 0):
            raise ValueError("snapshot times must be strictly increasing")
        if len(self.cells) != len(self.times):
            raise ValueError("need one block of cells per time point")
        self.observed_species = tuple(int(s) for s in self.observed_species)
        n_obs = len(self.observed_species)
        blocks = []
        for c in self.cells:
            c = np.asarray(c, dtype=np.int64).reshape(-1, n_obs)
            if c.shape[0] < 1:
                raise ValueError("every time point needs at least one cell")
            if np.any(c < 0):
                raise ValueError("copy numbers must be non-negative")
            blocks.append(c)
        self.cells = blocks

    @classmethod
    def empty(cls, observed_species=(0,)):
        obj = cls.__new__(cls)
        obj.times = np.zeros(0)
        obj.cells = []
        obj.observed_species = tuple(observed_species)
        return obj

    @property
    def n_cells(self) -> int:
        return sum(c.shape[0] for c in self.cells)

    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256(self.times.tobytes())
        h.update(np.asarray(self.observed_species).tobytes())
        for c in self.cells:
            h.update(c.tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class ModelHierarchy:
    """Nested fidelity bounds ``b[0] <= b[1] <= ... <= b[K-1]``."""

    bounds: tuple
    eps: float = 1e-8

    def __post_init__(self):
        bounds = tuple(tuple(int(v) for v in as_bound(b)) for b in self.bounds)
        if not bounds:
            raise ValueError("hierarchy needs at least one level")
        arr = np.array(bounds)
        if np.any(np.diff(arr, axis=0) < 0):
            raise ValueError("hierarchy bounds must be elementwise non-decreasing")
        object.__setattr__(self, "bounds", bounds)

    @property
    def n_levels(self) -> int:
        return len(self.bounds)

    def bound(self, level: int) -> np.ndarray:
        return np.array(self.bounds[level], dtype=np.int64)

    @classmethod
    def interpolated(cls, lower, upper, n_levels_max: int, n_levels: int | None = None,
                     eps: float = 1e-8) -> "ModelHierarchy":
        """``b_l = floor(c + (l - 1) (d - c) / (L_max + 1))`` for l = 1..n_levels.

        ``n_levels`` defaults to ``n_levels_max``; pass ``upper`` as an extra
        final level with :meth:`with_top` if the run should end at ``d``.
        """
        c = np.asarray(lower, dtype=float)
        d = np.asarray(upper, dtype=float)
        n_levels = n_levels_max if n_levels is None else n_levels
        bounds = [np.floor(c + (l - 1) * (d - c) / (n_levels_max + 1)).astype(int)
                  for l in range(1, n_levels + 1)]
        return cls(tuple(map(tuple, bounds)), eps)

    def with_top(self, top) -> "ModelHierarchy":
        return ModelHierarchy(self.bounds + (tuple(int(v) for v in top),), self.eps)


def clamp_observations(obs: np.ndarray, bound_obs: np.ndarray) -> np.ndarray:
    return np.minimum(obs, bound_obs)


def marginal_lookup(states: np.ndarray, p: np.ndarray, observed, query: np.ndarray) -> np.ndarray:
    """Probabilities of ``query`` rows under the marginal of p on ``observed`` coordinates."""
    sub = states[:, list(observed)]
    if sub.shape[0] == 0:
        return np.zeros(query.shape[0])
    radix = np.maximum(sub.max(axis=0), query.max(axis=0, initial=0)) + 1
    strides = np.ones(len(radix), dtype=np.int64)
    for i in range(len(radix) - 2, -1, -1):
        strides[i] = strides[i + 1] * radix[i + 1]
    keys = sub @ strides
    uniq, inv = np.unique(keys, return_inverse=True)
    pm = np.bincount(inv.ravel(), weights=p, minlength=len(uniq))
    qk = query @ strides
    pos = np.minimum(np.searchsorted(uniq, qk), len(uniq) - 1)
    return np.where(uniq[pos] == qk, pm[pos], 0.0)


def surrogate_log_likelihood(net: ReactionNetwork, theta, data: SnapshotDataset, level: int,
                             hier: ModelHierarchy, init, cfg: IntegratorConfig = IntegratorConfig(),
                             max_states: int = DEFAULT_MAX_STATES) -> float:
    """Log-likelihood of the data under the level-``level`` surrogate CME.

    Observations are clamped to the level's bound on the observed species and
    looked up in the marginal over those species.  Returns ``-inf`` when the
    solver cannot fit the required state set.
    """
    if not data.cells:
        return 0.0
    if not 0 <= level < hier.n_levels:
        raise ValueError(f"level {level} outside hierarchy of {hier.n_levels} levels")
    b = hier.bound(level)
    times = data.times + net.time_shift(theta)
    try:
        sol = solve_cme_adaptive(net, theta, times, hier.eps, b, init, cfg, max_states=max_states)
    except (CapacityError, IntegratorError) as exc:
        logger.warning("likelihood solve failed at theta=%s level=%d: %s",
                       np.array2string(np.asarray(theta), precision=4), level, exc)
        return -math.inf
    obs_idx = list(data.observed_species)
    b_obs = b[obs_idx]
    total = 0.0
    for dist, cells in zip(sol, data.cells):
        uniq, counts = np.unique(clamp_observations(cells, b_obs), axis=0, return_counts=True)
        probs = marginal_lookup(dist.states, dist.p, obs_idx, uniq)
        if np.any(probs <= PROB_FLOOR):
            logger.debug("observation with probability below floor at t=%g", dist.time)
        total += float(counts @ np.log(np.maximum(probs, PROB_FLOOR)))
    return total


def full_log_likelihood(net, theta, data, hier, init, cfg=IntegratorConfig(),
                        max_states=DEFAULT_MAX_STATES) -> float:
    return surrogate_log_likelihood(net, theta, data, hier.n_levels - 1, hier, init, cfg, max_states)


class LogLikeCache:
    """Log-likelihood values keyed by exact (level, theta bytes)."""

    def __init__(self, max_size: int = 500_000):
        self.max_size = max_size
        self._d: OrderedDict = OrderedDict()
        self.hits = 0

    @staticmethod
    def key(level: int, theta) -> tuple:
        return (int(level), np.ascontiguousarray(theta, dtype=float).tobytes())

    def get(self, level, theta):
        k = self.key(level, theta)
        v = self._d.get(k)
        if v is not None:
            self.hits += 1
        return v

    def put(self, level, theta, value: float):
        self._d[self.key(level, theta)] = float(value)
        if len(self._d) > self.max_size:
            self._d.popitem(last=False)

    def __len__(self):
        return len(self._d)


class HierarchicalLikelihood:
    """Base for objects the samplers query: ``evaluate(thetas, level)``.

    Subclasses implement :meth:`_compute` for a single parameter vector.
    Evaluation is cached per (level, theta), deduplicated within a batch,
    optionally spread over worker processes, and counted per level.
    """

    n_levels: int = 1

    def __init__(self, workers: int = 1):
        self.workers = max(1, int(workers))
        self.cache = LogLikeCache()
        self.solve_counts = np.zeros(self.n_levels, dtype=np.int64)
        self._pool = None

    def _compute(self, theta: np.ndarray, level: int) -> float:
        raise NotImplementedError

    def evaluate(self, thetas, level: int) -> np.ndarray:
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        out = np.empty(thetas.shape[0])
        todo: dict = {}
        for i, th in enumerate(thetas):
            v = self.cache.get(level, th)
            if v is None:
                todo.setdefault(th.tobytes(), []).append(i)
            else:
                out[i] = v
        if todo:
            firsts = [idx[0] for idx in todo.values()]
            vals = self._map([thetas[i] for i in firsts], level)
            self.solve_counts[level] += len(firsts)
            for (k, idx), v in zip(todo.items(), vals):
                out[idx] = v
                self.cache.put(level, thetas[idx[0]], v)
        return out

    def _map(self, thetas, level):
        if self.workers == 1 or len(thetas) < 2:
            return [self._compute(th, level) for th in thetas]
        pool = self._get_pool()
        chunk = max(1, math.ceil(len(thetas) / (4 * self.workers)))
        return list(pool.map(_worker_compute, thetas, [level] * len(thetas), chunksize=chunk))

    def _get_pool(self):
        if self._pool is None:
            ctx = mp.get_context("fork") if "fork" in mp.get_all_start_methods() else None
            self._pool = ProcessPoolExecutor(self.workers, mp_context=ctx,
                                             initializer=_worker_init, initargs=(self,))
        return self._pool

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def __getstate__(self):
        state = self.__dict__.copy()
        state["_pool"] = None
        state["cache"] = LogLikeCache()
        return state

    def __del__(self):
        try:
            self.close()
        except Exception:
            pass


_WORKER_LIKELIHOOD = None


def _worker_init(like):
    global _WORKER_LIKELIHOOD
    _WORKER_LIKELIHOOD = like


def _worker_compute(theta, level):
    return _WORKER_LIKELIHOOD._compute(theta, level)


class CMELikelihood(HierarchicalLikelihood):
    """Surrogate-CME likelihood hierarchy for a network and dataset."""

    def __init__(self, net: ReactionNetwork, data: SnapshotDataset, hierarchy: ModelHierarchy,
                 init, cfg: IntegratorConfig = IntegratorConfig(),
                 max_states: int = DEFAULT_MAX_STATES, workers: int = 1):
        self.net = net
        self.data = data
        self.hierarchy = hierarchy
        self.init = init
        self.cfg = cfg
        self.max_states = max_states
        self.n_levels = hierarchy.n_levels
        if len(hierarchy.bounds[0]) != net.n_species:
            raise ValueError("hierarchy bounds do not match the number of species")
        super().__init__(workers)

    def _compute(self, theta, level):
        return surrogate_log_likelihood(self.net, theta, self.data, level, self.hierarchy,
                                        self.init, self.cfg, self.max_states)


class FunctionLikelihood(HierarchicalLikelihood):
    """Hierarchy from plain callables ``f(theta) -> log-likelihood``, one per level."""

    def __init__(self, funcs, workers: int = 1):
        self.funcs = list(funcs)
        self.n_levels = len(self.funcs)
        super().__init__(workers)

    def _compute(self, theta, level):
        return float(self.funcs[level](theta))


def batch_log_likelihood(particles, level: int, like: HierarchicalLikelihood) -> np.ndarray:
    return like.evaluate(particles, level)
