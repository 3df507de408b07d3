"""Command line: ``mfstmcmc {solve,simulate,infer,evidence} --config FILE``.

Flags override environment variables (``MFSTMCMC_SEED``, ``MFSTMCMC_WORKERS``,
``MFSTMCMC_OUT``, ``MFSTMCMC_STRATEGY``, ``MFSTMCMC_CONFIG``), which override
the config file.  Exit codes: 0 success, 2 configuration error, 3 sampler abort.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from . import io
from .fsp import CapacityError, solve_cme_adaptive
from .integrate import IntegratorError
from .likelihood import CMELikelihood, ModelHierarchy, SnapshotDataset
from .multifi import STRATEGIES, BridgingStrategy, run_multifidelity, run_report
from .network import ConfigurationError, ModelError
from .ssa import generate_snapshot_dataset
from .stmcmc import SamplerConfig, SamplerError

logger = logging.getLogger("mfstmcmc")

EXIT_OK, EXIT_CONFIG, EXIT_SAMPLER = 0, 2, 3


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg.get("out") or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _count_lines(path: Path) -> int:
    return len(path.read_text().splitlines()) if path.exists() else 0


def _require(cfg: dict, *keys):
    for k in keys:
        if k not in cfg:
            raise ConfigurationError(f"config is missing {k!r}")


# ---------------------------------------------------------------- solve

def cmd_solve(cfg: dict) -> dict:
    _require(cfg, "model", "theta", "times")
    spec = io.load_model(cfg["model"])
    theta = io.theta_from_config(cfg["theta"], spec)
    times = np.asarray(cfg["times"], dtype=float)
    if "bound" in cfg:
        bound = cfg["bound"]
    elif "hierarchy" in cfg:
        hier = io.resolve_hierarchy(cfg["hierarchy"])
        bound = hier.bounds[int(cfg.get("level", hier.n_levels - 1))]
    else:
        raise ConfigurationError("solve needs 'bound' or 'hierarchy'")
    eps = float(cfg.get("eps", 1e-8))
    t0 = time.perf_counter()
    sol = solve_cme_adaptive(spec.net, theta, times, eps, bound, spec.initial_state,
                             io.integrator_config(cfg), max_states=int(cfg.get("max_states", 2_000_000)))
    elapsed = time.perf_counter() - t0
    out = _out_dir(cfg)
    files = []
    for i, pv in enumerate(sol.distributions):
        name = f"distribution_t{i}.csv"
        (out / name).write_text(io.distribution_csv(pv.states, pv.p, spec.net.species))
        files.append(name)
    report = {
        "format_version": io.FORMAT_VERSION,
        "times": [float(t) for t in times],
        "final_error": float(sol.distributions[-1].error),
        "truncation_error": [float(pv.truncation_error) for pv in sol.distributions],
        "frozen_mass": [float(pv.frozen_mass) for pv in sol.distributions],
        "states_used": int(len(sol.space)),
        "expansions": int(sol.expansions),
        "solve_time": elapsed,
        "files": files,
        "resolved_config": cfg,
    }
    io.write_json(out / "solve_report.json", report)
    return report


# ---------------------------------------------------------------- simulate

def cmd_simulate(cfg: dict) -> dict:
    _require(cfg, "model", "theta", "times", "n_cells")
    spec = io.load_model(cfg["model"])
    theta = io.theta_from_config(cfg["theta"], spec)
    n_cells = np.broadcast_to(np.asarray(cfg["n_cells"], dtype=int), np.shape(cfg["times"]))
    if np.any(n_cells < 1):
        raise ConfigurationError("n_cells must be at least 1 at every time point")
    data, manifest = generate_snapshot_dataset(spec.net, theta, cfg["times"], n_cells, int(cfg.get("seed", 0)),
                                               spec.initial_state, spec.observed_species)
    out = _out_dir(cfg)
    io.write_dataset_csv(out / "data.csv", data, spec.net.species)
    io.write_json(out / "manifest.json", manifest)
    return manifest


# ---------------------------------------------------------------- infer

@dataclass
class InferenceSetup:
    spec: io.ModelSpec
    data: SnapshotDataset
    hierarchy: ModelHierarchy
    sampler: SamplerConfig
    strategy: BridgingStrategy


def prepare_inference(cfg: dict) -> InferenceSetup:
    """Validate everything an inference run needs before any CME solve."""
    _require(cfg, "model", "dataset", "hierarchy")
    spec = io.load_model(cfg["model"])
    data = io.read_dataset_csv(cfg["dataset"], spec.net.species)
    hier = io.resolve_hierarchy(cfg["hierarchy"])
    if len(hier.bounds[0]) != spec.net.n_species:
        raise ConfigurationError(f"hierarchy bounds have {len(hier.bounds[0])} entries, "
                                 f"model has {spec.net.n_species} species")
    sp = io.sampler_params(cfg)
    st = io.strategy_params(cfg)
    if st["kind"] not in STRATEGIES:
        raise ConfigurationError(f"unknown strategy {st['kind']!r}; choose from {STRATEGIES}")
    sampler = SamplerConfig(n_particles=int(sp["n_particles"]), kappa=float(sp["kappa"]),
                            correlation_target=float(sp["correlation_target"]),
                            max_sweep_iters=int(sp["max_sweep_iters"]), seed=int(cfg.get("seed", 0)))
    strategy = BridgingStrategy(st["kind"], float(st["kappa_bridge"]), float(st["kappa_cross"]),
                                None if st.get("n_it") is None else int(st["n_it"]))
    return InferenceSetup(spec, data, hier, sampler, strategy)


def cmd_infer(cfg: dict, setup: InferenceSetup | None = None) -> tuple[dict, int]:
    setup = setup or prepare_inference(cfg)
    out = _out_dir(cfg)
    like = CMELikelihood(setup.spec.net, setup.data, setup.hierarchy, setup.spec.initial_state,
                         io.integrator_config(cfg), int(cfg.get("max_states", 2_000_000)),
                         workers=int(cfg.get("workers", 1)))
    t0 = time.perf_counter()
    try:
        res = run_multifidelity(like, setup.spec.prior, setup.sampler, setup.strategy,
                                parameter_names=setup.spec.net.parameters, log_path=out / "levels.jsonl")
    except (SamplerError, CapacityError, IntegratorError) as exc:
        counts = [int(c) for c in like.solve_counts]
        report = {
            "format_version": io.FORMAT_VERSION, "strategy": setup.strategy.kind, "status": "aborted",
            "error": str(exc), "log_evidence": None, "log_evidence_sigma": None,
            "levels": _count_lines(out / "levels.jsonl"),
            "full_model_solves": counts[-1], "per_fidelity_solve_counts": counts,
            "final_beta": 0.0, "final_fidelity": 0,
            "wall_time": time.perf_counter() - t0, "resolved_config": cfg,
        }
        io.write_json(out / "report.json", report)
        logger.error("sampler aborted: %s", exc)
        return report, EXIT_SAMPLER
    finally:
        like.close()
    (out / "samples.csv").write_text(res.samples_csv())
    report = run_report(res, setup.strategy.kind, {
        "status": "completed",
        "wall_time": time.perf_counter() - t0,
        "parameters": list(res.parameter_names),
        "posterior_mean": [float(v) for v in res.samples.mean(axis=0)],
        "posterior_std": [float(v) for v in res.samples.std(axis=0)],
        "resolved_config": cfg,
    })
    io.write_json(out / "report.json", io.json_safe(report))
    done = report["final_beta"] >= 1.0 and report["final_fidelity"] == setup.hierarchy.n_levels - 1
    return report, EXIT_OK if done else EXIT_SAMPLER


# ---------------------------------------------------------------- evidence

def evidence_table(names, log_z, sigma, prior_weights=None) -> dict:
    """Bayes factors ``log Z_i - log Z_j`` and the model-class posterior."""
    log_z = np.asarray(log_z, dtype=float)
    k = log_z.size
    w = np.full(k, 1.0 / k) if prior_weights is None else np.asarray(prior_weights, dtype=float)
    if w.shape != (k,) or np.any(w < 0) or w.sum() <= 0:
        raise ConfigurationError("prior_weights must be non-negative, one per model")
    w = w / w.sum()
    with np.errstate(divide="ignore"):
        lp = log_z + np.log(w)
    post = np.exp(lp - logsumexp(lp))
    return {
        "names": list(names),
        "log_bayes_factors": (log_z[:, None] - log_z[None, :]).tolist(),
        "class_posterior": post.tolist(),
        "prior_weights": w.tolist(),
    }


def format_evidence_table(models: list, table: dict) -> str:
    w = max(8, *(len(m["name"]) for m in models))
    lines = [f"{'model':<{w}}  {'log evidence':>22}  {'time (s)':>9}  {'P(model|D)':>10}"]
    for m, p in zip(models, table["class_posterior"]):
        ev = f"{m['log_evidence']:.3f} ± {m['log_evidence_sigma']:.3f}"
        lines.append(f"{m['name']:<{w}}  {ev:>22}  {m['wall_time']:>9.1f}  {p:>10.4f}")
    lines.append("")
    lines.append("log Bayes factors (row vs column):")
    lines.append(" " * w + "".join(f"  {m['name']:>{w}}" for m in models))
    for m, row in zip(models, table["log_bayes_factors"]):
        lines.append(f"{m['name']:<{w}}" + "".join(f"  {v:>{w}.3f}" for v in row))
    return "\n".join(lines)


def cmd_evidence(cfg: dict, overrides: dict | None = None) -> tuple[dict, int]:
    _require(cfg, "models")
    entries = []
    for i, m in enumerate(cfg["models"]):
        path = m if isinstance(m, str) else m["config"]
        name = Path(path).stem if isinstance(m, str) else m.get("name", Path(path).stem)
        entries.append((name, path))
    if len(entries) < 2:
        raise ConfigurationError("evidence comparison needs at least two models")
    out = _out_dir(cfg)
    runs = []
    sub = {k: v for k, v in (overrides or {}).items() if k in ("seed", "workers", "strategy")}
    for name, path in entries:
        mcfg = io.load_config(path, sub)
        mcfg["out"] = str((out / name).resolve())
        runs.append((name, mcfg, prepare_inference(mcfg)))
    prints = {s.data.fingerprint() for _, _, s in runs}
    if len(prints) != 1:
        raise ConfigurationError("models in an evidence comparison must share one dataset")
    models = []
    for name, mcfg, setup in runs:
        rep, code = cmd_infer(mcfg, setup)
        if code != EXIT_OK:
            return {"failed_model": name, "report": rep}, code
        models.append({"name": name, "log_evidence": rep["log_evidence"],
                       "log_evidence_sigma": rep["log_evidence_sigma"], "wall_time": rep["wall_time"]})
    table = evidence_table([m["name"] for m in models], [m["log_evidence"] for m in models],
                           [m["log_evidence_sigma"] for m in models], cfg.get("prior_weights"))
    for m, w in zip(models, table["prior_weights"]):
        m["prior_weight"] = w
    report = {
        "format_version": io.FORMAT_VERSION,
        "models": models,
        "log_bayes_factors": table["log_bayes_factors"],
        "class_posterior": table["class_posterior"],
        "dataset_fingerprint": prints.pop(),
    }
    io.write_json(out / "evidence.json", report)
    text = format_evidence_table(models, table)
    (out / "evidence.txt").write_text(text + "\n")
    print(text)
    return report, EXIT_OK


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mfstmcmc", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    subs = p.add_subparsers(dest="command", required=True)
    for name, help_ in (("solve", "solve the CME at given parameters"),
                        ("simulate", "simulate a snapshot dataset with the SSA"),
                        ("infer", "run multifidelity ST-MCMC"),
                        ("evidence", "compare model evidences on one dataset")):
        s = subs.add_parser(name, help=help_)
        s.add_argument("--config", help="JSON config file (or an infer report)")
        s.add_argument("--seed", type=int)
        s.add_argument("--workers", type=int)
        s.add_argument("--out", help="output directory")
        s.add_argument("--strategy", choices=STRATEGIES)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        env = io.env_overrides()
        flags = {k: getattr(args, k) for k in ("seed", "workers", "out", "strategy")}
        overrides = {**env, **{k: v for k, v in flags.items() if v is not None}}
        cfg_path = args.config or overrides.pop("config", None)
        overrides.pop("config", None)
        if not cfg_path:
            raise ConfigurationError("no config given (use --config or MFSTMCMC_CONFIG)")
        if overrides.get("seed", 0) < 0 or overrides.get("workers", 1) < 1:
            raise ConfigurationError("seed must be >= 0 and workers >= 1")
        if args.command == "evidence":
            cfg = io.load_config(cfg_path, {"out": overrides.get("out")})
            _, code = cmd_evidence(cfg, overrides)
            return code
        cfg = io.load_config(cfg_path, overrides)
        if args.command == "solve":
            cmd_solve(cfg)
            return EXIT_OK
        if args.command == "simulate":
            cmd_simulate(cfg)
            return EXIT_OK
        _, code = cmd_infer(cfg)
        return code
    except (ConfigurationError, ModelError, ValueError, KeyError) as exc:
        print(f"mfstmcmc: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
