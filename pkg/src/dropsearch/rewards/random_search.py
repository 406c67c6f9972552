"""Uniform random search baseline, logged like a controller search."""
from __future__ import annotations

import math

import numpy as np

from ..errors import ContractError, EvaluationFailed, SearchAborted
from ..evaluation import EvalResult, Evaluator
from ..scheduler import SearchResult, job_seed
from ..space import SearchSpace, uniform_random_genome


def random_search(space: SearchSpace, evaluator: Evaluator, budget: int, seed: int = 0,
                  on_record=None, max_failure_rate: float = 0.5, abort_min_jobs: int = 16) -> SearchResult:
    """Evaluate ``budget`` uniform genomes; failed draws are replaced by new ones."""
    if budget < 1:
        raise ContractError("budget must be >= 1")
    rng = np.random.default_rng([seed, 1])
    logp = -math.log(space.cardinality)
    records, curve = [], []
    best = None
    successes = failures = job_id = 0
    while successes < budget:
        genome = uniform_random_genome(space, rng)
        s = job_seed(seed, job_id)
        rec = {"job_id": job_id, "genome": str(genome), "logp_old": logp, "theta_version": 0,
               "seed": s, "status": "evaluated", "perf": None, "staleness": None, "consumed_by": None,
               "spawned_at": float(job_id), "clock": float(job_id + 1), "error": None, "metrics": {}}
        job_id += 1
        try:
            result = evaluator(genome, s)
            if not isinstance(result, EvalResult):
                result = EvalResult(float(result))
            if not math.isfinite(result.perf):
                raise EvaluationFailed(f"non-finite perf {result.perf}")
        except EvaluationFailed as exc:
            failures += 1
            rec.update(status="failed", error=str(exc) or type(exc).__name__)
            records.append(rec)
            if on_record:
                on_record(rec)
            attempts = failures + successes
            if attempts >= abort_min_jobs and failures / attempts > max_failure_rate:
                raise SearchAborted(f"{failures} of {attempts} evaluations failed")
            continue
        successes += 1
        rec.update(perf=float(result.perf), metrics=dict(result.metrics))
        if best is None or result.perf > best[0]:
            best = (float(result.perf), genome)
        curve.append(best[0])
        records.append(rec)
        if on_record:
            on_record(rec)
    return SearchResult(best[0], best[1], curve, records, [], successes, failures, float(job_id))
