"""JSON schemas for every file the command line writes or reads.

Plain dicts in JSON Schema draft 2020-12 form, so any validator can use them.
"""

_num = {"type": ["number", "null"]}
_int_list = {"type": "array", "items": {"type": "integer"}}
_num_list = {"type": "array", "items": {"type": "number"}}

MODEL = {
    "type": "object",
    "required": ["format_version", "species", "parameters", "reactions"],
    "properties": {
        "format_version": {"const": 1},
        "species": {"type": "array", "items": {"type": "string"}, "minItems": 1},
        "parameters": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["name", "prior_mean", "prior_std"],
                "properties": {
                    "name": {"type": "string"},
                    "prior_mean": {"type": "number"},
                    "prior_std": {"type": "number", "exclusiveMinimum": 0},
                },
            },
        },
        "reactions": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["propensity"],
                "properties": {
                    "name": {"type": "string"},
                    "reactants": {"type": ["array", "object"]},
                    "products": {"type": ["array", "object"]},
                    "propensity": {
                        "type": "object",
                        "required": ["kind"],
                        "properties": {"kind": {"enum": ["mass_action", "hill", "time_varying_max", "linear"]}},
                    },
                },
            },
        },
        "initial_state": _int_list,
        "observed_species": {"type": "array", "items": {"type": ["string", "integer"]}},
        "time_offset": {"type": "string"},
    },
}

MANIFEST = {
    "type": "object",
    "required": ["format_version", "theta_true", "seed", "times", "n_cells"],
    "properties": {
        "format_version": {"const": 1},
        "theta_true": _num_list,
        "parameters": {"type": "array", "items": {"type": "string"}},
        "seed": {"type": "integer", "minimum": 0},
        "times": _num_list,
        "n_cells": _int_list,
        "x0": _int_list,
        "observed_species": {"type": "array", "items": {"type": "string"}},
    },
}

SOLVE_REPORT = {
    "type": "object",
    "required": ["format_version", "times", "final_error", "states_used", "solve_time", "files"],
    "properties": {
        "format_version": {"const": 1},
        "times": _num_list,
        "final_error": {"type": "number", "minimum": 0},
        "states_used": {"type": "integer", "minimum": 1},
        "solve_time": {"type": "number", "minimum": 0},
        "expansions": {"type": "integer", "minimum": 0},
        "truncation_error": _num_list,
        "frozen_mass": _num_list,
        "files": {"type": "array", "items": {"type": "string"}},
    },
}

LEVEL_RECORD = {
    "type": "object",
    "required": ["level", "beta", "fidelity", "delta_beta", "ess", "cov", "acceptance",
                 "sweep_iters", "wall_time", "log_c_l", "strategy_decision"],
    "properties": {
        "level": {"type": "integer", "minimum": 1},
        "beta": {"type": "number", "minimum": 0, "maximum": 1},
        "fidelity": {"type": "integer", "minimum": 0},
        "delta_beta": {"type": "number", "minimum": 0},
        "ess": {"type": "number", "minimum": 0},
        "cov": _num,
        "acceptance": {"type": "number", "minimum": 0, "maximum": 1},
        "sweep_iters": {"type": "integer", "minimum": 0},
        "wall_time": {"type": "number", "minimum": 0},
        "log_c_l": _num,
        "strategy_decision": {"enum": ["temper", "bridge"]},
        "it_criterion_value": _num,
        "cross_cov": _num,
        "mean_weight": _num,
    },
}

INFER_REPORT = {
    "type": "object",
    "required": ["format_version", "strategy", "status", "log_evidence", "log_evidence_sigma",
                 "levels", "full_model_solves", "per_fidelity_solve_counts", "final_beta",
                 "final_fidelity", "resolved_config", "wall_time"],
    "properties": {
        "format_version": {"const": 1},
        "strategy": {"enum": ["full", "ess", "it", "tuned-it"]},
        "status": {"enum": ["completed", "aborted"]},
        "error": {"type": "string"},
        "log_evidence": _num,
        "log_evidence_sigma": _num,
        "levels": {"type": "integer", "minimum": 0},
        "full_model_solves": {"type": "integer", "minimum": 0},
        "per_fidelity_solve_counts": _int_list,
        "top_solves_before_first_bridge": {"type": ["integer", "null"]},
        "final_beta": {"type": "number"},
        "final_fidelity": {"type": "integer"},
        "wall_time": {"type": "number", "minimum": 0},
        "posterior_mean": _num_list,
        "posterior_std": _num_list,
        "parameters": {"type": "array", "items": {"type": "string"}},
        "resolved_config": {"type": "object", "required": ["format_version"]},
    },
}

EVIDENCE_REPORT = {
    "type": "object",
    "required": ["format_version", "models", "log_bayes_factors", "class_posterior"],
    "properties": {
        "format_version": {"const": 1},
        "models": {
            "type": "array",
            "minItems": 2,
            "items": {
                "type": "object",
                "required": ["name", "log_evidence", "log_evidence_sigma", "wall_time"],
                "properties": {
                    "name": {"type": "string"},
                    "log_evidence": {"type": "number"},
                    "log_evidence_sigma": {"type": "number", "minimum": 0},
                    "wall_time": {"type": "number", "minimum": 0},
                    "prior_weight": {"type": "number", "minimum": 0},
                },
            },
        },
        "log_bayes_factors": {"type": "array", "items": _num_list},
        "class_posterior": _num_list,
        "dataset_fingerprint": {"type": "string"},
    },
}

SCHEMAS = {
    "model": MODEL,
    "manifest": MANIFEST,
    "solve_report": SOLVE_REPORT,
    "level_record": LEVEL_RECORD,
    "infer_report": INFER_REPORT,
    "evidence_report": EVIDENCE_REPORT,
}
