"""Input checks shared by the estimator, the command line and the solvers."""

from __future__ import annotations

import numbers

import numpy as np

from .likelihood import SnapshotDataset
from .network import ConfigurationError, ReactionNetwork


def check_positive_int(value, name: str, minimum: int = 1) -> int:
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise ConfigurationError(f"{name} must be an integer, got {value!r}")
    if value < minimum:
        raise ConfigurationError(f"{name} must be >= {minimum}, got {value}")
    return int(value)


def check_positive_float(value, name: str) -> float:
    try:
        v = float(value)
    except (TypeError, ValueError):
        raise ConfigurationError(f"{name} must be a number, got {value!r}") from None
    if not (v > 0 and np.isfinite(v)):
        raise ConfigurationError(f"{name} must be positive and finite, got {value!r}")
    return v


def check_theta(theta, n_params: int) -> np.ndarray:
    """Finite 1-D parameter vector (log10 scale) of the expected length."""
    th = np.asarray(theta, dtype=float)
    if th.ndim != 1 or th.size != n_params:
        raise ConfigurationError(f"expected {n_params} parameters, got shape {th.shape}")
    if not np.all(np.isfinite(th)):
        raise ConfigurationError("parameters must be finite")
    return th


def check_thetas(thetas, n_params: int) -> np.ndarray:
    th = np.atleast_2d(np.asarray(thetas, dtype=float))
    if th.ndim != 2 or th.shape[1] != n_params:
        raise ConfigurationError(f"expected rows of {n_params} parameters, got shape {th.shape}")
    return th


def check_bound(b, n_species: int) -> np.ndarray:
    arr = np.asarray(b)
    if arr.ndim != 1 or arr.size != n_species:
        raise ConfigurationError(f"bound needs {n_species} entries, got {arr.size}")
    if not np.all(np.equal(np.mod(arr, 1), 0)) or np.any(arr < 0):
        raise ConfigurationError("bound entries must be non-negative integers")
    return arr.astype(np.int64)


def check_times(times) -> np.ndarray:
    t = np.asarray(times, dtype=float)
    if t.ndim != 1 or t.size == 0:
        raise ConfigurationError("times must be a non-empty 1-D sequence")
    if t[0] < 0 or np.any(np.diff(t) <= 0) or not np.all(np.isfinite(t)):
        raise ConfigurationError("times must be finite, non-negative and strictly increasing")
    return t


def check_dataset(data, net: ReactionNetwork | None = None) -> SnapshotDataset:
    """Accept a SnapshotDataset or a ``{time: cells}`` mapping plus network context."""
    if isinstance(data, dict):
        if net is None:
            raise ConfigurationError("a mapping dataset needs the network to infer observed species")
        times = sorted(data)
        data = SnapshotDataset(np.array(times, dtype=float), [np.asarray(data[t]) for t in times],
                               tuple(range(net.n_species)))
    if not isinstance(data, SnapshotDataset):
        raise ConfigurationError(f"expected a SnapshotDataset, got {type(data).__name__}")
    if net is not None and any(s < 0 or s >= net.n_species for s in data.observed_species):
        raise ConfigurationError("dataset observes a species the network does not have")
    return data
