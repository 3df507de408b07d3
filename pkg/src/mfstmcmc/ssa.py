"""Gillespie simulation for synthetic data and for cross-checking CME solutions.

``ssa_simulate`` runs one trajectory with the direct method.  With a
fidelity bound the surrogate propensities are used: the moment any species
exceeds its bound every propensity becomes zero and the path freezes.
Time-varying propensities are handled by thinning against the per-reaction
time-factor bound, which reduces to the direct method for constant rates.

``simulate_batch`` advances many independent trajectories in lock-step with
numpy, drawing from one stream per batch, and records each at its own
requested time.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .fsp import ProbabilityVector, StateSpace
from .likelihood import SnapshotDataset
from .network import ReactionNetwork


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    frozen: bool = False
    frozen_at: float | None = None

    def state_at(self, t: float) -> np.ndarray:
        k = int(np.searchsorted(self.times, t, side="right")) - 1
        return self.states[max(k, 0)]


def _block_stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, key)])))


def _cap(bound) -> np.ndarray | None:
    """Copy-number caps for freezing; unlike solver bounds, zero is allowed."""
    if bound is None:
        return None
    b = np.atleast_1d(np.asarray(bound, dtype=np.int64))
    if b.ndim != 1 or np.any(b < 0):
        raise ValueError(f"bound entries must be non-negative, got {b}")
    return b


def ssa_simulate(net: ReactionNetwork, theta, t_final: float, x0, rng: np.random.Generator,
                 bound=None, max_events: int = 10_000_000) -> Trajectory:
    lin = net.linear_params(theta)
    nu = net.stoichiometry
    b = _cap(bound)
    x = np.asarray(x0, dtype=np.int64).copy()
    if b is not None and np.any(x > b):
        return Trajectory(np.array([0.0]), x[None].copy(), True, 0.0)
    tv = net.is_time_varying
    tf_bound = net.time_factor_bounds(lin) if tv else None
    times, states = [0.0], [x.copy()]
    t = 0.0
    for _ in range(max_events):
        if tv:
            a = net.state_factors(x[None], lin)[0] * tf_bound
        else:
            a = net.propensities(x[None], lin, t)[0]
        a0 = a.sum()
        if a0 <= 0.0:
            break
        t += -math.log1p(-rng.random()) / a0
        if t > t_final:
            break
        j = int(np.searchsorted(np.cumsum(a), rng.random() * a0, side="right"))
        j = min(j, len(a) - 1)
        if tv:
            true_rate = net.propensities(x[None], lin, t)[0, j]
            if rng.random() * a[j] >= true_rate:
                continue
        x = x + nu[j]
        times.append(t)
        states.append(x.copy())
        if b is not None and np.any(x > b):
            return Trajectory(np.array(times), np.array(states), True, t)
    else:
        raise RuntimeError("maximum number of SSA events exceeded")
    return Trajectory(np.array(times), np.array(states), False, None)


def simulate_batch(net: ReactionNetwork, theta, x0, record_times, rng: np.random.Generator,
                   bound=None) -> np.ndarray:
    """States of independent trajectories at ``record_times[i]`` (one trajectory per entry).

    Returns an integer array of shape (len(record_times), n_species).
    Time-varying networks fall back to per-trajectory simulation.
    """
    record_times = np.asarray(record_times, dtype=float)
    B = record_times.size
    if net.is_time_varying:
        out = np.empty((B, net.n_species), dtype=np.int64)
        for i, tr in enumerate(record_times):
            traj = ssa_simulate(net, theta, tr, x0, rng, bound)
            out[i] = traj.state_at(tr)
        return out
    lin = net.linear_params(theta)
    nu = net.stoichiometry
    b = _cap(bound)
    X = np.tile(np.asarray(x0, dtype=np.int64), (B, 1))
    t = np.zeros(B)
    active = np.arange(B)
    while active.size:
        Xa = X[active]
        a = net.propensities(Xa, lin)
        if b is not None:
            a[np.any(Xa > b, axis=1)] = 0.0
        a0 = a.sum(axis=1)
        u1 = rng.random(active.size)
        u2 = rng.random(active.size)
        with np.errstate(divide="ignore"):
            tau = np.where(a0 > 0, -np.log1p(-u1) / np.where(a0 > 0, a0, 1.0), np.inf)
        t_new = t[active] + tau
        fire = t_new <= record_times[active]
        idx = active[fire]
        if idx.size:
            cs = np.cumsum(a[fire], axis=1)
            j = (cs < (u2[fire] * a0[fire])[:, None]).sum(axis=1)
            j = np.minimum(j, nu.shape[0] - 1)
            X[idx] += nu[j]
            t[idx] = t_new[fire]
        active = idx
    return X


def generate_snapshot_dataset(net: ReactionNetwork, theta_true, times, n_cells, seed: int,
                              x0, observed_species) -> tuple[SnapshotDataset, dict]:
    """Independent cells at every time point, observed species only."""
    times = np.asarray(times, dtype=float)
    counts = np.broadcast_to(np.asarray(n_cells, dtype=int), times.shape)
    if np.any(counts < 1):
        raise ValueError("n_cells must be at least 1 for every time point")
    obs = list(observed_species)
    cells = []
    for i, (t, n) in enumerate(zip(times, counts)):
        X = simulate_batch(net, theta_true, x0, np.full(n, t), _block_stream(seed, i))
        cells.append(X[:, obs])
    data = SnapshotDataset(times, cells, tuple(obs))
    manifest = {
        "format_version": 1,
        "theta_true": [float(v) for v in np.asarray(theta_true)],
        "parameters": list(net.parameters),
        "seed": int(seed),
        "times": [float(v) for v in times],
        "n_cells": [int(v) for v in counts],
        "x0": [int(v) for v in np.asarray(x0).ravel()],
        "observed_species": [net.species[i] for i in obs],
    }
    return data, manifest


def empirical_histogram(cells, space: StateSpace, time: float = 0.0) -> ProbabilityVector:
    """Normalised counts on ``space``; cells beyond the bound are clamped onto it.

    Clamped cells that land on a state absent from an adaptive space are
    dropped, so the result may sum to less than one.
    """
    X = np.atleast_2d(np.asarray(cells, dtype=np.int64))
    if X.shape[0] == 0:
        raise ValueError("need at least one cell")
    X = np.minimum(X, space.bound)
    idx = space.index_of(X)
    p = np.bincount(idx[idx >= 0], minlength=len(space)).astype(float) / X.shape[0]
    return ProbabilityVector(space.states.copy(), p, time)


def total_variation(p, q) -> float:
    return 0.5 * float(np.sum(np.abs(np.asarray(p) - np.asarray(q))))


def save_manifest(path, manifest: dict):
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
