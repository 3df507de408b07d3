"""Benchmark reaction networks with their priors and reference parameters."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import (
    Hill,
    Linear,
    MassAction,
    PriorSpec,
    ReactionNetwork,
    Signal,
    TimeVaryingMax,
    make_reaction,
)


@dataclass(frozen=True)
class Benchmark:
    net: ReactionNetwork
    prior: PriorSpec
    theta_true: np.ndarray
    init: tuple
    observed_species: tuple


def birth_death(k_name: str = "k", g_name: str = "gamma") -> ReactionNetwork:
    """0 -> X at rate k, X -> 0 at rate gamma * X."""
    return ReactionNetwork(
        species=("X",),
        reactions=(
            make_reaction(1, {}, {0: 1}, MassAction(k_name), "birth"),
            make_reaction(1, {0: 1}, {}, MassAction(g_name), "death"),
        ),
        parameters=(k_name, g_name),
    )


def birth_death_benchmark(k: float = 10.0, gamma: float = 1.0, prior_std: float = 0.5) -> Benchmark:
    theta = np.log10([k, gamma])
    return Benchmark(birth_death(), PriorSpec(theta + np.array([0.3, -0.2]), np.full(2, prior_std)),
                     theta, (0,), (0,))


def gene_expression(n_gene_states: int, compartments: bool = True) -> ReactionNetwork:
    """Multi-state gene with transcription from every active state.

    Species are ``G0..G{n-1}`` followed by nuclear and cytoplasmic RNA.  With
    ``compartments=False`` a single RNA species is transcribed and degraded
    directly, which keeps state spaces small for quick benchmarks.
    """
    n = int(n_gene_states)
    if n < 2:
        raise ValueError("need at least two gene states")
    species = [f"G{i}" for i in range(n)]
    species += ["RNA_nuc", "RNA_cyt"] if compartments else ["RNA"]
    ns = len(species)
    rna = n
    params, rxns = [], []
    for i in range(1, n):
        params.append(f"k{i - 1}{i}")
        rxns.append(make_reaction(ns, {i - 1: 1}, {i: 1}, MassAction(f"k{i - 1}{i}"), f"G{i-1}->G{i}"))
    for i in range(1, n):
        params.append(f"k{i}{i - 1}")
        rxns.append(make_reaction(ns, {i: 1}, {i - 1: 1}, MassAction(f"k{i}{i - 1}"), f"G{i}->G{i-1}"))
    for i in range(1, n):
        params.append(f"r{i}")
        rxns.append(make_reaction(ns, {i: 1}, {i: 1, rna: 1}, MassAction(f"r{i}"), f"transcription{i}"))
    if compartments:
        params += ["k_trans", "gamma"]
        rxns.append(make_reaction(ns, {rna: 1}, {rna + 1: 1}, MassAction("k_trans"), "transport"))
        rxns.append(make_reaction(ns, {rna + 1: 1}, {}, MassAction("gamma"), "decay"))
    else:
        params.append("gamma")
        rxns.append(make_reaction(ns, {rna: 1}, {}, MassAction("gamma"), "decay"))
    return ReactionNetwork(tuple(species), tuple(rxns), tuple(params))


def bursting_gene_benchmark(prior_std: float = 0.5) -> Benchmark:
    """Two-state telegraph gene with a single observed RNA species."""
    net = gene_expression(2, compartments=False)
    # k01 (on), k10 (off), r1 (transcription), gamma
    theta = np.log10([0.4, 1.5, 20.0, 1.0])
    prior = PriorSpec(theta + np.array([0.2, -0.2, -0.2, 0.2]), np.full(4, prior_std))
    return Benchmark(net, prior, theta, (1, 0, 0), (2,))


def three_state_gene_benchmark(prior_std: float = 0.5) -> Benchmark:
    net = gene_expression(3, compartments=False)
    # k01, k12, k10, k21, r1, r2, gamma
    theta = np.log10([0.4, 0.5, 1.5, 1.0, 5.0, 30.0, 1.0])
    prior = PriorSpec(theta + 0.15 * np.array([1, -1, 1, -1, 1, -1, 1]), np.full(7, prior_std))
    return Benchmark(net, prior, theta, (1, 0, 0, 0), (3,))


def repressilator() -> ReactionNetwork:
    names = ("k0", "gamma0", "a0", "b0", "k1", "gamma1", "a1", "b1", "k2", "gamma2", "a2", "b2")
    # TetR (0) is repressed by LacI (2), lambda-cI (1) by TetR, LacI by lambda-cI
    regulator = {0: 2, 1: 0, 2: 1}
    rxns = []
    for s in range(3):
        k, g, a, b = names[4 * s: 4 * s + 4]
        rxns.append(make_reaction(3, {}, {s: 1}, Hill(k, a, b, regulator[s]), f"produce{s}"))
        rxns.append(make_reaction(3, {s: 1}, {}, MassAction(g), f"degrade{s}"))
    return ReactionNetwork(("TetR", "lambdacI", "LacI"), tuple(rxns), names)


def repressilator_benchmark() -> Benchmark:
    theta = np.array([1.0, -2.0, -1.0, 0.3, 0.88, -1.7, -2.0, 0.4, 1.0, -1.3, -1.3, 0.48])
    prior = PriorSpec(np.tile([1.0, -1.0, -1.0, -1.0], 3), np.full(12, 0.3))
    return Benchmark(repressilator(), prior, theta, (0, 0, 0), (0, 1, 2))


def il1beta() -> ReactionNetwork:
    names = ("r1", "r2", "k01", "a10", "b10", "k12", "k21", "alpha1", "alpha2", "gamma", "T0")
    sig = Signal("r1", "r2", "T0")
    rxns = (
        make_reaction(4, {0: 1}, {1: 1}, MassAction("k01"), "G0->G1"),
        make_reaction(4, {1: 1}, {2: 1}, MassAction("k12"), "G1->G2"),
        make_reaction(4, {2: 1}, {1: 1}, MassAction("k21"), "G2->G1"),
        make_reaction(4, {1: 1}, {0: 1}, TimeVaryingMax("a10", "b10", sig), "G1->G0"),
        make_reaction(4, {}, {3: 1}, Linear((("alpha1", 1), ("alpha2", 2))), "transcription"),
        make_reaction(4, {3: 1}, {}, MassAction("gamma"), "decay"),
    )
    return ReactionNetwork(("G0", "G1", "G2", "RNA"), rxns, names, time_offset="T0")


def il1beta_prior() -> PriorSpec:
    mean = [-2.0, -2.0, -3.0, -2.0, 3.0, -3.0, -2.0, -3.0, 0.0, -4.0, 4.0]
    return PriorSpec(np.array(mean), np.full(11, 0.33))


BENCHMARKS = {
    "birth_death": birth_death_benchmark,
    "bursting_gene": bursting_gene_benchmark,
    "three_state_gene": three_state_gene_benchmark,
    "repressilator": repressilator_benchmark,
}
