"""Result type shared by reward evaluators and the scheduler."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

from .space import PatternGenome


@dataclass
class EvalResult:
    perf: float
    metrics: dict = field(default_factory=dict)


# evaluate(genome, seed) -> EvalResult or float; raise EvaluationFailed to report a failure
Evaluator = Callable[[PatternGenome, int], "EvalResult | float"]
