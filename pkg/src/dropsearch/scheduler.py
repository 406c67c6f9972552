"""Asynchronous sample/evaluate/update loop with two queues.

``q_unfinished`` holds spawned jobs that have not reported back (queued or
running); ``q_finished`` holds successful results waiting to be consumed by a
controller update. The queue refills up to capacity ``C`` whenever it drops,
and every time ``M`` results are waiting, the controller takes one step on
them. Jobs keep the log-probability and parameter version they were sampled
with, so updates can importance-weight stale samples.

Every job ends in exactly one of three states: ``consumed`` by an update,
``failed``, or ``leftover`` (finished after the last update). Failed jobs do
not count towards the budget; their slot is refilled with a fresh sample.

Two drivers share the protocol. :func:`run_simulated` replays a worker-count
trace on a virtual clock and is fully deterministic. :func:`run_live` runs
evaluations on a thread pool.
"""
from __future__ import annotations

import heapq
import logging
import math
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .controller import Controller, SampleRecord, UpdateInfo
from .errors import ContractError, EvaluationFailed, SearchAborted
from .evaluation import EvalResult, Evaluator
from .space import PatternGenome

log = logging.getLogger(__name__)


def job_seed(seed: int, job_id: int) -> int:
    return int(np.random.default_rng([seed, job_id, 3]).integers(2**31 - 1))


def job_duration(seed: int, job_id: int) -> float:
    return float(np.random.default_rng([seed, job_id, 7]).uniform(0.5, 1.5))


@dataclass
class Job:
    job_id: int
    record: SampleRecord
    seed: int
    spawned_at: float = 0.0
    status: str = "queued"  # queued | running | done | consumed | failed | leftover
    perf: float | None = None
    metrics: dict = field(default_factory=dict)
    error: str | None = None
    finished_at: float | None = None
    staleness: int | None = None
    consumed_by: int | None = None

    def to_record(self) -> dict:
        return {
            "job_id": self.job_id,
            "genome": str(self.record.genome),
            "logp_old": self.record.logp_old,
            "theta_version": self.record.theta_version,
            "seed": self.seed,
            "status": self.status,
            "perf": self.perf,
            "staleness": self.staleness,
            "consumed_by": self.consumed_by,
            "spawned_at": self.spawned_at,
            "clock": self.finished_at,
            "error": self.error,
            "metrics": self.metrics,
        }


@dataclass
class SchedulerConfig:
    budget: int
    batch_size: int = 16
    capacity: int | None = None  # defaults to 4 * batch_size
    seed: int = 0
    max_failure_rate: float = 0.5
    abort_min_jobs: int = 16

    def __post_init__(self):
        if self.capacity is None:
            self.capacity = 4 * self.batch_size
        if not self.capacity >= self.batch_size >= 1:
            raise ContractError(f"need capacity >= batch_size >= 1, got C={self.capacity}, M={self.batch_size}")
        if self.budget < self.batch_size:
            raise ContractError(f"budget {self.budget} is smaller than one batch of {self.batch_size}")
        if not 0.0 < self.max_failure_rate <= 1.0:
            raise ContractError("max_failure_rate must lie in (0, 1]")


class Scheduler:
    """The two-queue protocol, independent of how jobs are executed."""

    def __init__(self, controller: Controller, config: SchedulerConfig,
                 on_record: Callable[[dict], None] | None = None):
        if controller.config.batch_size != config.batch_size:
            raise ContractError("controller and scheduler disagree on batch size")
        self.controller = controller
        self.config = config
        self.rng = np.random.default_rng([config.seed, 1])
        self.q_unfinished: dict[int, Job] = {}
        self.q_finished: list[Job] = []
        self.jobs: dict[int, Job] = {}
        self.records: list[dict] = []
        self.updates: list[UpdateInfo] = []
        self.on_record = on_record
        self.next_id = 0
        self.successes = 0
        self.failures = 0
        self.best: tuple[float, PatternGenome] | None = None
        self.best_curve: list[float] = []

    @property
    def done(self) -> bool:
        return self.successes >= self.config.budget and not self.q_unfinished

    def fill_queue(self, now: float = 0.0) -> list[Job]:
        """Spawn jobs until capacity is reached or the budget is covered."""
        room = self.config.capacity - len(self.q_unfinished)
        room = min(room, self.config.budget - self.successes - len(self.q_unfinished))
        spawned = []
        for _ in range(max(room, 0)):
            rec = self.controller.sample(self.rng)
            job = Job(self.next_id, rec, job_seed(self.config.seed, self.next_id), spawned_at=now)
            self.next_id += 1
            self.q_unfinished[job.job_id] = job
            self.jobs[job.job_id] = job
            spawned.append(job)
        return spawned

    def start(self, job_id: int) -> Job:
        job = self.q_unfinished.get(job_id)
        if job is None or job.status != "queued":
            raise ContractError(f"job {job_id} is not queued")
        job.status = "running"
        return job

    def _emit(self, job: Job) -> None:
        rec = job.to_record()
        self.records.append(rec)
        if self.on_record is not None:
            self.on_record(rec)

    def on_complete(self, job_id: int, result: "EvalResult | float | None" = None,
                    error: str | None = None, now: float = 0.0) -> UpdateInfo | None:
        """Record a finished job; runs a controller update once ``M`` results wait."""
        job = self.q_unfinished.get(job_id)
        if job is None:
            raise ContractError(f"job {job_id} is not outstanding (duplicate or unknown completion)")
        if job.status != "running":
            raise ContractError(f"job {job_id} completed before it was started")
        del self.q_unfinished[job_id]
        job.finished_at = now
        if error is None:
            if not isinstance(result, EvalResult):
                result = EvalResult(float(result))
            if not math.isfinite(result.perf):
                error = f"non-finite perf {result.perf}"
        if error is not None:
            job.status, job.error = "failed", error
            self.failures += 1
            self._emit(job)
            attempts = self.failures + self.successes
            if attempts >= self.config.abort_min_jobs and self.failures / attempts > self.config.max_failure_rate:
                raise SearchAborted(f"{self.failures} of {attempts} evaluations failed")
            return None
        job.status, job.perf, job.metrics = "done", float(result.perf), dict(result.metrics)
        self.successes += 1
        if self.best is None or job.perf > self.best[0]:
            self.best = (job.perf, job.record.genome)
        self.best_curve.append(self.best[0])
        self.q_finished.append(job)
        if len(self.q_finished) < self.config.batch_size:
            return None
        batch = self.q_finished[:self.config.batch_size]
        self.q_finished = self.q_finished[self.config.batch_size:]
        info = self.controller.update([j.record for j in batch], [j.perf for j in batch])
        self.updates.append(info)
        for j, s in zip(batch, info.staleness):
            j.status, j.staleness, j.consumed_by = "consumed", s, info.version
            self._emit(j)
        log.debug("update %d: mean perf %.4f, baseline %.4f", info.version, info.mean_perf, info.baseline)
        return info

    def finish(self) -> None:
        """Flush results that arrived after the last full batch."""
        for j in self.q_finished:
            j.status = "leftover"
            self._emit(j)
        self.q_finished = []


@dataclass
class SearchResult:
    best_perf: float | None
    best_genome: PatternGenome | None
    best_curve: list
    records: list
    updates: list
    successes: int
    failures: int
    clock: float


def _result(s: Scheduler, clock: float) -> SearchResult:
    s.finish()
    perf, genome = s.best if s.best else (None, None)
    return SearchResult(perf, genome, list(s.best_curve), s.records, s.updates, s.successes, s.failures, clock)


def _evaluate(evaluator: Evaluator, job: Job):
    try:
        return evaluator(job.record.genome, job.seed), None
    except EvaluationFailed as exc:
        return None, str(exc) or type(exc).__name__


@dataclass(frozen=True)
class WorkerTrace:
    """Piecewise-constant worker count: ``points[i] = (start_time, workers)``."""
    points: tuple

    def __post_init__(self):
        pts = tuple((float(t), int(w)) for t, w in self.points)
        if not pts or pts[0][0] != 0.0:
            raise ContractError("worker trace must start at time 0")
        if any(b[0] <= a[0] for a, b in zip(pts, pts[1:])):
            raise ContractError("worker trace times must increase")
        if any(w < 0 for _, w in pts):
            raise ContractError("worker counts must be non-negative")
        if pts[-1][1] == 0:
            raise ContractError("worker trace must end with at least one worker")
        object.__setattr__(self, "points", pts)

    def workers_at(self, t: float) -> int:
        w = self.points[0][1]
        for start, n in self.points:
            if start <= t:
                w = n
        return w

    def next_change(self, t: float) -> float:
        for start, _ in self.points:
            if start > t:
                return start
        return math.inf

    @classmethod
    def constant(cls, workers: int) -> "WorkerTrace":
        return cls(((0.0, workers),))

    @classmethod
    def fluctuating(cls, seed: int, horizon: float = 2000.0, low: int = 1, high: int = 16,
                    mean_dwell: float = 5.0) -> "WorkerTrace":
        rng = np.random.default_rng([seed, 11])
        pts, t = [], 0.0
        while t < horizon:
            pts.append((t, int(rng.integers(low, high + 1))))
            t += float(rng.exponential(mean_dwell)) + 0.5
        return cls(tuple(pts))

    def to_list(self) -> list:
        return [list(p) for p in self.points]


def run_simulated(controller: Controller, evaluator: Evaluator, config: SchedulerConfig,
                  trace: WorkerTrace, on_record=None,
                  duration: Callable[[int, int], float] = job_duration) -> SearchResult:
    """Discrete-event run on a virtual clock. Running jobs are never preempted."""
    s = Scheduler(controller, config, on_record)
    now = 0.0
    running: list[tuple[float, int]] = []
    s.fill_queue(now)
    while not s.done:
        free = trace.workers_at(now) - len(running)
        for job in [j for j in s.q_unfinished.values() if j.status == "queued"][:max(free, 0)]:
            s.start(job.job_id)
            heapq.heappush(running, (now + duration(config.seed, job.job_id), job.job_id))
        t_done = running[0][0] if running else math.inf
        t_change = trace.next_change(now)
        if math.isinf(t_done) and math.isinf(t_change):
            raise ContractError("simulation stalled: queued jobs but no workers")
        if t_change < t_done:
            now = t_change
            continue
        now, job_id = heapq.heappop(running)
        result, err = _evaluate(evaluator, s.jobs[job_id])
        s.on_complete(job_id, result, err, now)
        s.fill_queue(now)
    return _result(s, now)


def run_live(controller: Controller, evaluator: Evaluator, config: SchedulerConfig,
             workers: int = 4, on_record=None) -> SearchResult:
    """Thread-pool run. Completion order, and hence the updates, depend on timing."""
    import time

    s = Scheduler(controller, config, on_record)
    start = time.monotonic()
    futures = {}
    with ThreadPoolExecutor(max_workers=workers) as pool:
        s.fill_queue(0.0)
        while not s.done:
            for job in [j for j in s.q_unfinished.values() if j.status == "queued"]:
                s.start(job.job_id)
                futures[pool.submit(_evaluate, evaluator, job)] = job.job_id
            finished, _ = wait(list(futures), return_when=FIRST_COMPLETED)
            for fut in sorted(finished, key=futures.get):
                job_id = futures.pop(fut)
                result, err = fut.result()
                now = time.monotonic() - start
                s.on_complete(job_id, result, err, now)
                s.fill_queue(now)
    return _result(s, time.monotonic() - start)


def run_search(controller: Controller, evaluator: Evaluator, config: SchedulerConfig,
               mode: str = "simulated", trace: WorkerTrace | None = None, workers: int = 4,
               on_record=None) -> SearchResult:
    if mode == "simulated":
        return run_simulated(controller, evaluator, config, trace or WorkerTrace.constant(workers), on_record)
    if mode == "live":
        return run_live(controller, evaluator, config, workers, on_record)
    raise ContractError(f"unknown scheduler mode {mode!r}")


def run_synchronous(controller: Controller, evaluator: Evaluator, budget: int, seed: int = 0) -> list[UpdateInfo]:
    """Reference loop: sample M, evaluate M, update; no queue, no staleness."""
    rng = np.random.default_rng([seed, 1])
    m = controller.config.batch_size
    updates, job_id = [], 0
    batch = []
    while job_id < budget:
        rec = controller.sample(rng)
        result = evaluator(rec.genome, job_seed(seed, job_id))
        job_id += 1
        batch.append((rec, result.perf if isinstance(result, EvalResult) else float(result)))
        if len(batch) == m:
            updates.append(controller.update([r for r, _ in batch], [p for _, p in batch]))
            batch = []
    return updates
