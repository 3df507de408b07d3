"""Model, configuration, dataset and result files.

Configs, models and reports are JSON with a ``format_version`` field; bulk
tables (datasets, samples, distributions) are CSV.
"""

from __future__ import annotations

import copy
import csv
import io as _io
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .integrate import IntegratorConfig
from .likelihood import ModelHierarchy, SnapshotDataset
from .network import (
    ConfigurationError,
    Hill,
    Linear,
    MassAction,
    PriorSpec,
    ReactionNetwork,
    Signal,
    TimeVaryingMax,
    make_reaction,
)

FORMAT_VERSION = 1
ENV_PREFIX = "MFSTMCMC_"


def _check_version(doc: dict, what: str):
    v = doc.get("format_version")
    if v != FORMAT_VERSION:
        raise ConfigurationError(f"{what}: unsupported format_version {v!r} (expected {FORMAT_VERSION})")


def read_json(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise ConfigurationError(f"file not found: {path}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        line = text.splitlines()[exc.lineno - 1] if exc.lineno - 1 < len(text.splitlines()) else ""
        raise ConfigurationError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}\n    {line}") from None


def write_json(path, doc: dict):
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True, allow_nan=True)
        f.write("\n")


# ---------------------------------------------------------------- models

@dataclass
class ModelSpec:
    net: ReactionNetwork
    prior: PriorSpec
    initial_state: tuple
    observed_species: tuple
    doc: dict


def _species_index(net_species, ref, ctx):
    if isinstance(ref, int):
        return ref
    try:
        return net_species.index(ref)
    except ValueError:
        raise ConfigurationError(f"{ctx}: unknown species {ref!r}") from None


def _param_ref(v, ctx):
    if isinstance(v, (str, int, float)) and not isinstance(v, bool):
        return v
    raise ConfigurationError(f"{ctx}: parameter reference must be a name or a number, got {v!r}")


def _stoich(v, species, ctx):
    n = len(species)
    if isinstance(v, dict):
        out = np.zeros(n, dtype=np.int64)
        for k, c in v.items():
            out[_species_index(species, k, ctx)] = int(c)
        return out
    arr = np.asarray(v, dtype=np.int64)
    if arr.ndim != 1 or arr.size != n:
        raise ConfigurationError(
            f"{ctx}: stoichiometry has length {arr.size}, expected {n} (one entry per species)")
    return arr


def _propensity(doc, species, ctx):
    kind = doc.get("kind")
    if kind == "mass_action":
        return MassAction(_param_ref(doc["rate"], ctx))
    if kind == "hill":
        return Hill(_param_ref(doc["numerator"], ctx), _param_ref(doc["scale"], ctx),
                    _param_ref(doc["exponent"], ctx), _species_index(species, doc["regulator"], ctx))
    if kind == "time_varying_max":
        s = doc["signal"]
        return TimeVaryingMax(_param_ref(doc["base"], ctx), _param_ref(doc["coeff"], ctx),
                              Signal(_param_ref(s["r1"], ctx), _param_ref(s["r2"], ctx),
                                     _param_ref(s["t0"], ctx)))
    if kind == "linear":
        return Linear(tuple((_param_ref(w, ctx), _species_index(species, s, ctx)) for w, s in doc["terms"]))
    raise ConfigurationError(f"{ctx}: unknown propensity kind {kind!r}")


def model_from_dict(doc: dict, where: str = "model") -> ModelSpec:
    _check_version(doc, where)
    try:
        species = list(doc["species"])
        params = doc["parameters"]
        names = [p["name"] for p in params]
        rxns = []
        for j, r in enumerate(doc["reactions"]):
            ctx = f"{where}: reaction {j} ({r.get('name', '')})"
            reac = _stoich(r.get("reactants", {}), species, ctx)
            prod = _stoich(r.get("products", {}), species, ctx)
            rxns.append(make_reaction(len(species), reac, prod, _propensity(r["propensity"], species, ctx),
                                      r.get("name", f"r{j}")))
        net = ReactionNetwork(tuple(species), tuple(rxns), tuple(names), doc.get("time_offset"))
        prior = PriorSpec(np.array([p["prior_mean"] for p in params], dtype=float),
                          np.array([p["prior_std"] for p in params], dtype=float))
        init = tuple(int(v) for v in doc.get("initial_state", [0] * len(species)))
        if len(init) != len(species):
            raise ConfigurationError(f"{where}: initial_state needs {len(species)} entries")
        obs = tuple(_species_index(species, s, where) for s in doc.get("observed_species", species))
    except KeyError as exc:
        raise ConfigurationError(f"{where}: missing field {exc.args[0]!r}") from None
    return ModelSpec(net, prior, init, obs, doc)


def model_to_dict(net: ReactionNetwork, prior: PriorSpec, initial_state, observed_species) -> dict:
    def ref(v):
        return v if isinstance(v, str) else float(v)

    def prop(p):
        if isinstance(p, MassAction):
            return {"kind": "mass_action", "rate": ref(p.rate)}
        if isinstance(p, Hill):
            return {"kind": "hill", "numerator": ref(p.numerator), "scale": ref(p.scale),
                    "exponent": ref(p.exponent), "regulator": net.species[p.regulator]}
        if isinstance(p, TimeVaryingMax):
            s = p.signal
            return {"kind": "time_varying_max", "base": ref(p.base), "coeff": ref(p.coeff),
                    "signal": {"r1": ref(s.r1), "r2": ref(s.r2), "t0": ref(s.t0)}}
        return {"kind": "linear", "terms": [[ref(w), net.species[s]] for w, s in p.terms]}

    doc = {
        "format_version": FORMAT_VERSION,
        "species": list(net.species),
        "parameters": [{"name": n, "prior_mean": float(m), "prior_std": float(s)}
                       for n, m, s in zip(net.parameters, prior.mean, prior.std)],
        "reactions": [{"name": r.name, "reactants": [int(v) for v in r.reactants],
                       "products": [int(v) for v in r.products], "propensity": prop(r.propensity)}
                      for r in net.reactions],
        "initial_state": [int(v) for v in initial_state],
        "observed_species": [net.species[i] for i in observed_species],
    }
    if net.time_offset:
        doc["time_offset"] = net.time_offset
    return doc


def load_model(path) -> ModelSpec:
    return model_from_dict(read_json(path), str(path))


# ---------------------------------------------------------------- datasets

def write_dataset_csv(path_or_buf, data: SnapshotDataset, species_names):
    names = [species_names[i] for i in data.observed_species]
    own = isinstance(path_or_buf, (str, Path))
    f = open(path_or_buf, "w", newline="") if own else path_or_buf
    try:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["time"] + names)
        for t, cells in zip(data.times, data.cells):
            for c in cells:
                w.writerow([repr(float(t))] + [int(v) for v in c])
    finally:
        if own:
            f.close()


def dataset_csv_text(data: SnapshotDataset, species_names) -> str:
    buf = _io.StringIO()
    write_dataset_csv(buf, data, species_names)
    return buf.getvalue()


def read_dataset_csv(path, species_names) -> SnapshotDataset:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"dataset not found: {path}")
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0][0].strip() != "time":
        raise ConfigurationError(f"{path}:1: header must start with 'time'")
    header = [h.strip() for h in rows[0]]
    obs = []
    for name in header[1:]:
        if name not in species_names:
            raise ConfigurationError(f"{path}:1: column {name!r} is not a model species")
        obs.append(list(species_names).index(name))
    by_time: dict[float, list] = {}
    for k, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise ConfigurationError(f"{path}:{k}: expected {len(header)} fields, got {len(row)}")
        try:
            t = float(row[0])
            counts = [int(v) for v in row[1:]]
        except ValueError as exc:
            raise ConfigurationError(f"{path}:{k}: {exc}") from None
        if any(c < 0 for c in counts):
            raise ConfigurationError(f"{path}:{k}: negative copy number")
        by_time.setdefault(t, []).append(counts)
    times = sorted(by_time)
    return SnapshotDataset(np.array(times), [np.array(by_time[t]) for t in times], tuple(obs))


# ---------------------------------------------------------------- run configs

DEFAULT_SAMPLER = {"n_particles": 256, "kappa": 1.0, "correlation_target": 0.6, "max_sweep_iters": 100}
DEFAULT_STRATEGY = {"kind": "tuned-it", "kappa_bridge": 1.0, "kappa_cross": 1.0, "n_it": None}


def interpolated_bounds(lower, upper, l_max: int, n_levels: int | None = None,
                        include_upper: bool = True) -> list:
    """``floor(c + (l - 1)(d - c)/(l_max + 1))`` for l = 1..n_levels, then ``d`` on top."""
    hier = ModelHierarchy.interpolated(lower, upper, l_max, n_levels)
    bounds = [list(b) for b in hier.bounds]
    d = [int(v) for v in upper]
    if include_upper and bounds[-1] != d:
        bounds.append(d)
    return bounds


def resolve_hierarchy(doc) -> ModelHierarchy:
    eps = float(doc.get("eps", 1e-8))
    if "bounds" in doc:
        return ModelHierarchy(tuple(tuple(b) for b in doc["bounds"]), eps)
    if "interpolate" in doc:
        it = doc["interpolate"]
        return ModelHierarchy(tuple(map(tuple, interpolated_bounds(
            it["lower"], it["upper"], int(it["l_max"]), it.get("n_levels"),
            it.get("include_upper", True)))), eps)
    raise ConfigurationError("hierarchy needs either 'bounds' or 'interpolate'")


def env_overrides(environ=None) -> dict:
    """Values from ``MFSTMCMC_SEED``, ``_WORKERS``, ``_OUT``, ``_STRATEGY``, ``_CONFIG``."""
    environ = os.environ if environ is None else environ
    out = {}
    for key, conv in (("SEED", int), ("WORKERS", int), ("OUT", str), ("STRATEGY", str), ("CONFIG", str)):
        v = environ.get(ENV_PREFIX + key)
        if v is not None and v != "":
            try:
                out[key.lower()] = conv(v)
            except ValueError:
                raise ConfigurationError(f"{ENV_PREFIX}{key}={v!r} is not a valid value") from None
    return out


def load_config(path, overrides: dict | None = None) -> dict:
    """Read a run config, resolve relative paths and apply overrides.

    A report written by ``infer`` can be passed directly: its embedded
    ``resolved_config`` is used.
    """
    path = Path(path).resolve()
    doc = read_json(path)
    if "resolved_config" in doc:
        doc = doc["resolved_config"]
    _check_version(doc, str(path))
    cfg = copy.deepcopy(doc)
    base = path.parent
    for key in ("model", "dataset", "out"):
        if isinstance(cfg.get(key), str):
            cfg[key] = str((base / cfg[key]).resolve())
    if "models" in cfg:
        cfg["models"] = [str((base / m).resolve()) if isinstance(m, str)
                         else {**m, "config": str((base / m["config"]).resolve())} if "config" in m else m
                         for m in cfg["models"]]
    for k, v in (overrides or {}).items():
        if v is None:
            continue
        if k == "strategy":
            cfg.setdefault("strategy", {})
            if isinstance(cfg["strategy"], str):
                cfg["strategy"] = {"kind": cfg["strategy"]}
            cfg["strategy"]["kind"] = v
        elif k == "out":
            cfg["out"] = str(Path(v).resolve())
        else:
            cfg[k] = v
    return cfg


def strategy_params(cfg: dict) -> dict:
    s = cfg.get("strategy", {})
    if isinstance(s, str):
        s = {"kind": s}
    out = dict(DEFAULT_STRATEGY)
    out.update(s)
    return out


def sampler_params(cfg: dict) -> dict:
    out = dict(DEFAULT_SAMPLER)
    out.update(cfg.get("sampler", {}))
    if int(out["n_particles"]) < 2:
        raise ConfigurationError("sampler.n_particles must be at least 2")
    return out


def integrator_config(cfg: dict) -> IntegratorConfig:
    return IntegratorConfig(**cfg.get("integrator", {}))


def theta_from_config(value, spec: ModelSpec) -> np.ndarray:
    """Parameters as a list (log10, model order) or a {name: log10 value} map."""
    names = spec.net.parameters
    if isinstance(value, dict):
        missing = [n for n in names if n not in value]
        if missing:
            raise ConfigurationError(f"theta is missing parameters {missing}")
        return np.array([float(value[n]) for n in names])
    arr = np.asarray(value, dtype=float)
    if arr.shape != (len(names),):
        raise ConfigurationError(f"theta needs {len(names)} values, got {arr.size}")
    return arr


def distribution_csv(states, p, species_names) -> str:
    lines = [",".join(list(species_names) + ["probability"])]
    for x, q in zip(states, p):
        lines.append(",".join([str(int(v)) for v in x] + [f"{float(q):.17g}"]))
    return "\n".join(lines) + "\n"


def json_safe(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, dict):
        return {k: json_safe(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [json_safe(x) for x in v]
    if isinstance(v, np.generic):
        return json_safe(v.item())
    return v
