"""Reward with a known optimum, for checking the search loop itself.

``perf = exp(-lam * d)`` where ``d`` counts token positions at which the
genome differs from a hidden target genome. The maximum 1.0 is reached only
at the target.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..evaluation import EvalResult
from ..space import PatternGenome, SearchSpace, uniform_random_genome


@dataclass(frozen=True)
class SyntheticReward:
    space: SearchSpace
    target: PatternGenome
    lam: float = 1.0

    def __post_init__(self):
        self.space.validate(self.target)

    @classmethod
    def hidden(cls, space: SearchSpace, seed: int = 0, lam: float = 1.0) -> "SyntheticReward":
        target = uniform_random_genome(space, np.random.default_rng([seed, 99]))
        return cls(space, target, lam)

    def mismatches(self, genome: PatternGenome) -> int:
        a = self.space.to_tokens(genome)
        b = self.space.to_tokens(self.target)
        return sum(x != y for x, y in zip(a, b))

    def __call__(self, genome: PatternGenome, seed: int = 0) -> EvalResult:
        d = self.mismatches(genome)
        return EvalResult(math.exp(-self.lam * d), {"mismatches": d})
