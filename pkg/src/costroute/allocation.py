"""Subtask difficulty estimation and grouped allocation search.

The search walks each subtask along the capability ladder one model at a
time. Moves inside a capability group are the within-group phase; a move
that leaves a group (promotion after the group ceiling fails, demotion after
the group floor still succeeds) is the between-group phase.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

from .core import AnswerChecker, Decomposition, Subtask, SubtaskExecutor, TaskRecord, TokenProbSource
from .errors import EmptyProbSequence, InvalidThresholds, LimitZero, RouterError
from .execution import derive_seed, run_chain
from .pool import GroupedPool, ModelPool, medium_model

log = logging.getLogger(__name__)

MAX_SEARCH_LIMIT = 20
DEFAULT_ALPHA = 0.5
DEFAULT_TAU1 = 0.75
DEFAULT_TAU2 = 0.45


class Bucket(str, Enum):
    EASY = "G_E"
    MEDIUM = "G_M"
    HARD = "G_H"

    @property
    def tier(self) -> int:
        return _TIERS[self]


_TIERS = {Bucket.EASY: 0, Bucket.MEDIUM: 1, Bucket.HARD: 2}


@dataclass
class DifficultyEstimate:
    subtask_index: int
    alpha: float
    quantile_value: float
    bucket: Bucket | None = None


@dataclass
class AllocationScheme:
    task_id: str
    assignments: list[int]
    acc: int | None = None
    cost_microcents: int | None = None
    iteration: int = 0
    first_failure: int | None = field(default=None, compare=False)

    def to_json(self) -> dict:
        return {
            "task_id": self.task_id,
            "assignments": list(self.assignments),
            "acc": self.acc,
            "cost_microcents": self.cost_microcents,
            "iteration": self.iteration,
        }


@dataclass
class SearchTrace:
    schemes: list[AllocationScheme]
    result: AllocationScheme
    exhausted: bool

    def to_json(self) -> dict:
        return {
            "task_id": self.result.task_id,
            "result": self.result.to_json(),
            "exhausted": self.exhausted,
            "schemes": [s.to_json() for s in self.schemes],
        }


@dataclass
class AllocDatasetEntry:
    task_id: str
    subtasks: list[str]
    estimates: list[DifficultyEstimate]
    labels: list[int]

    def to_json(self) -> dict:
        return {
            "task_id": self.task_id,
            "subtasks": list(self.subtasks),
            "buckets": [e.bucket.value for e in self.estimates],
            "quantiles": [e.quantile_value for e in self.estimates],
            "labels": list(self.labels),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "AllocDatasetEntry":
        estimates = [
            DifficultyEstimate(i, math.nan, float(q), Bucket(b))
            for i, (q, b) in enumerate(zip(doc["quantiles"], doc["buckets"]))
        ]
        return cls(doc["task_id"], list(doc["subtasks"]), estimates, [int(x) for x in doc["labels"]])


def nearest_rank_quantile(values, alpha: float) -> float:
    """Smallest value whose rank is at least ``ceil(alpha * n)``."""
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    ordered = sorted(values)
    if not ordered:
        raise EmptyProbSequence("no token probabilities")
    rank = max(1, math.ceil(alpha * len(ordered)))
    return float(ordered[rank - 1])


def estimate_difficulty(
    task: TaskRecord,
    subtask: Subtask,
    prob_source: TokenProbSource,
    alpha: float = DEFAULT_ALPHA,
    seed: int = 0,
) -> DifficultyEstimate:
    probs = prob_source.token_probs(task, subtask, seed)
    if len(probs) == 0:
        raise EmptyProbSequence(f"{task.task_id} step {subtask.index}: empty probability sequence")
    if any(not 0.0 <= p <= 1.0 for p in probs):
        raise ValueError("token probabilities must lie in [0, 1]")
    return DifficultyEstimate(subtask.index, alpha, nearest_rank_quantile(probs, alpha))


def bucket_difficulty(value: float, tau1: float = DEFAULT_TAU1, tau2: float = DEFAULT_TAU2) -> Bucket:
    """Higher token probability means easier; boundary values fall to the harder bucket."""
    if not 0 <= tau2 < tau1 <= 1:
        raise InvalidThresholds(f"need 0 <= tau2 < tau1 <= 1, got tau1={tau1}, tau2={tau2}")
    if value > tau1:
        return Bucket.EASY
    if value > tau2:
        return Bucket.MEDIUM
    return Bucket.HARD


def estimate_all(
    task: TaskRecord,
    d: Decomposition,
    prob_source: TokenProbSource,
    alpha: float = DEFAULT_ALPHA,
    tau1: float = DEFAULT_TAU1,
    tau2: float = DEFAULT_TAU2,
    seed: int = 0,
) -> list[DifficultyEstimate]:
    out = []
    for sub in d.subtasks:
        est = estimate_difficulty(task, sub, prob_source, alpha, derive_seed(seed, task.task_id, sub.index))
        est.bucket = bucket_difficulty(est.quantile_value, tau1, tau2)
        out.append(est)
    return out


def initial_scheme(buckets: list[Bucket], grouped: GroupedPool, task_id: str = "") -> AllocationScheme:
    ids = [medium_model(grouped.groups[Bucket(b).tier]).id for b in buckets]
    return AllocationScheme(task_id, ids, iteration=0)


def _better(a: AllocationScheme, b: AllocationScheme | None) -> bool:
    if b is None:
        return True
    return (a.cost_microcents, sum(a.assignments)) < (b.cost_microcents, sum(b.assignments))


def grouped_search(
    task: TaskRecord,
    d: Decomposition,
    buckets: list[Bucket],
    grouped: GroupedPool,
    pool: ModelPool,
    executor: SubtaskExecutor,
    checker: AnswerChecker,
    limit: int = MAX_SEARCH_LIMIT,
    seed: int = 0,
) -> SearchTrace:
    """Search for the cheapest all-correct scheme within ``limit`` evaluations.

    A correct scheme steps its subtasks one model down; a failing one steps
    the first failing subtask up (every subtask up when the executor cannot
    say which step failed). A subtask whose lower neighbour failed is pinned.
    """
    if limit < 1:
        raise LimitZero("search limit must be at least 1")
    if limit > MAX_SEARCH_LIMIT:
        raise ValueError(f"search limit is capped at {MAX_SEARCH_LIMIT}")
    k = d.k
    top = pool.max_id
    floor = [0] * k
    schemes: list[AllocationScheme] = []
    best: AllocationScheme | None = None

    def evaluate(ids: list[int]) -> AllocationScheme:
        nonlocal best
        result = run_chain(task, d, ids, pool, executor, checker, seed=seed)
        scheme = AllocationScheme(
            task.task_id, list(ids), result.acc, result.cost_microcents, len(schemes),
            result.first_failure,
        )
        schemes.append(scheme)
        if scheme.acc and _better(scheme, best):
            best = scheme
        return scheme

    base = evaluate(initial_scheme(buckets, grouped).assignments)
    one_at_a_time = False
    exhausted = False
    while True:
        if len(schemes) >= limit:
            exhausted = True
            break
        if base.acc:
            movable = [i for i in range(k) if base.assignments[i] > floor[i]]
            if not movable:
                break
            if one_at_a_time:
                movable = movable[:1]
            cand = list(base.assignments)
            for i in movable:
                cand[i] -= 1
            trial = evaluate(cand)
            if trial.acc:
                base = trial
                continue
            f = trial.first_failure
            if f is not None and f in movable:
                floor[f] = base.assignments[f]
            elif len(movable) == 1:
                floor[movable[0]] = base.assignments[movable[0]]
            else:
                one_at_a_time = True
            continue

        f = base.first_failure
        if f is not None:
            if base.assignments[f] >= top:
                ceiling = [top] * k
                if ceiling != base.assignments and len(schemes) < limit:
                    base = evaluate(ceiling)
                exhausted = not base.acc
                if base.acc:
                    continue
                break
            floor[f] = max(floor[f], base.assignments[f] + 1)
            cand = [max(a, lo) for a, lo in zip(base.assignments, floor)]
        else:
            if all(a >= top for a in base.assignments):
                exhausted = True
                break
            cand = [min(a + 1, top) for a in base.assignments]
        base = evaluate(cand)

    result = best if best is not None else schemes[-1]
    return SearchTrace(schemes, result, exhausted)


def build_alloc_dataset(
    tasks: list[TaskRecord],
    decomposer: Callable[[TaskRecord], Decomposition],
    prob_source: TokenProbSource,
    grouped: GroupedPool,
    pool: ModelPool,
    executor: SubtaskExecutor,
    checker: AnswerChecker,
    limit: int = MAX_SEARCH_LIMIT,
    alpha: float = DEFAULT_ALPHA,
    tau1: float = DEFAULT_TAU1,
    tau2: float = DEFAULT_TAU2,
    seed: int = 0,
    workers: int = 1,
) -> list[AllocDatasetEntry]:
    """Search every task and keep only those that reached a correct scheme."""

    def one(task):
        try:
            d = decomposer(task)
            estimates = estimate_all(task, d, prob_source, alpha, tau1, tau2, seed)
            trace = grouped_search(
                task, d, [e.bucket for e in estimates], grouped, pool, executor, checker,
                limit, derive_seed(seed, task.task_id),
            )
        except RouterError as exc:
            log.warning("skipping task %s: %s", task.task_id, exc)
            return None
        if not trace.result.acc:
            log.info("task %s: no correct scheme within %d evaluations", task.task_id, limit)
            return None
        return AllocDatasetEntry(task.task_id, d.texts, estimates, list(trace.result.assignments))

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(one, tasks))
    else:
        results = [one(t) for t in tasks]
    return [r for r in results if r is not None]
