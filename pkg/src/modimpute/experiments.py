"""Scaled synthetic benchmark shared by the acceptance suite and ``scripts/``.

Widths and epochs are reduced from the full-size defaults so a seed runs
in minutes on one CPU; every other hyperparameter keeps its default.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .cli import RunConfig, run_benchmark
from .data import Cohort, SynthSpec, standardize, synth_cohort
from .evaluate import ClassifierHyper
from .phase1 import Phase1Hyper
from .phase2 import Phase2Hyper


def desk_phase1(seed: int = 0) -> Phase1Hyper:
    return Phase1Hyper(epochs=60, embedding_dim=32, hidden_dim=64, seed=seed)


def desk_phase2(seed: int = 0) -> Phase2Hyper:
    return Phase2Hyper(epochs=400, hidden_dim=64, seed=seed)


@dataclass
class SyntheticBenchmark:
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    missingness: float = 0.3
    methods: list[str] = field(default_factory=lambda: ["ours", "cgan", "complete_case"])
    depth: int = 4
    k: int = 5
    classifier_epochs: int = 200

    def cohort(self, seed: int) -> Cohort:
        spec = SynthSpec(missingness=[self.missingness] * 4, seed=seed)
        return standardize(synth_cohort(spec))[0]

    def config(self, seed: int) -> RunConfig:
        return RunConfig(
            k=self.k, seed=seed, depths=[self.depth], methods=list(self.methods),
            phase1=desk_phase1(seed), phase2=desk_phase2(seed),
            classifier=ClassifierHyper(epochs=self.classifier_epochs),
        )

    def run(self, seed: int):
        """``(tables, reports, summary)`` for one seed, as produced by the benchmark driver."""
        return run_benchmark(self.config(seed), self.cohort(seed))
