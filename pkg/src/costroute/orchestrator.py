"""Test-time routing: decompose, allocate, execute in order, integrate; plus metrics."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Protocol

from .allocation import (
    DEFAULT_ALPHA,
    DEFAULT_TAU1,
    DEFAULT_TAU2,
    AllocationScheme,
    estimate_all,
    grouped_search,
)
from .core import (
    AnswerChecker,
    Decomposition,
    DecompositionGenerator,
    Integrator,
    Reviewer,
    SubtaskExecutor,
    TaskRecord,
    TokenProbSource,
    last_result,
)
from .errors import EmptyTraces, LabelMismatch
from .execution import PrmConfig, derive_seed, prm_verify, run_chain
from .grpo import PolicyParams, choose_actions, featurize
from .pool import MICROCENTS_PER_CENT, GroupedPool, ModelPool

__all__ = [
    "RoutingTrace",
    "MetricsReport",
    "route_task",
    "route_many",
    "prm_verify",
    "compute_metrics",
    "mean_abs_index_error",
]

Decomposer = Callable[[TaskRecord], Decomposition]


class Allocator(Protocol):
    def allocate(self, task: TaskRecord, d: Decomposition) -> list[int]: ...


class FixedAllocator:
    """Every subtask goes to one model (the single-model comparator)."""

    def __init__(self, model_id: int):
        self.model_id = model_id

    def allocate(self, task, d):
        return [self.model_id] * d.k


class SchemeAllocator:
    def __init__(self, schemes: dict[str, list[int]]):
        self.schemes = schemes

    def allocate(self, task, d):
        return list(self.schemes[task.task_id])


class PolicyAllocator:
    """Routes with a trained categorical policy over subtask features."""

    def __init__(self, policy: PolicyParams, prob_source: TokenProbSource,
                 alpha=DEFAULT_ALPHA, tau1=DEFAULT_TAU1, tau2=DEFAULT_TAU2,
                 decode="greedy", confidence=0.9, probe_seed=0):
        self.policy = policy
        self.prob_source = prob_source
        self.alpha, self.tau1, self.tau2 = alpha, tau1, tau2
        self.decode, self.confidence = decode, confidence
        self.probe_seed = probe_seed

    def allocate(self, task, d):
        est = estimate_all(task, d, self.prob_source, self.alpha, self.tau1, self.tau2, self.probe_seed)
        x = featurize([e.quantile_value for e in est], [e.bucket for e in est], d.texts)
        return choose_actions(self.policy, x, self.decode, self.confidence)


class SearchAllocator:
    """Runs the grouped search per task and routes with its result."""

    def __init__(self, grouped: GroupedPool, pool: ModelPool, executor, checker,
                 prob_source, limit=20, alpha=DEFAULT_ALPHA, tau1=DEFAULT_TAU1,
                 tau2=DEFAULT_TAU2, seed=0):
        self.grouped, self.pool = grouped, pool
        self.executor, self.checker, self.prob_source = executor, checker, prob_source
        self.limit, self.alpha, self.tau1, self.tau2, self.seed = limit, alpha, tau1, tau2, seed

    def allocate(self, task, d):
        est = estimate_all(task, d, self.prob_source, self.alpha, self.tau1, self.tau2, self.seed)
        trace = grouped_search(task, d, [e.bucket for e in est], self.grouped, self.pool,
                               self.executor, self.checker, self.limit,
                               derive_seed(self.seed, task.task_id))
        return list(trace.result.assignments)


class PolicyDecomposer:
    """Picks one of the generator's candidate decompositions with a policy."""

    def __init__(self, generator: DecompositionGenerator, policy: PolicyParams,
                 task_features: Callable[[TaskRecord], object], seed: int = 0):
        self.generator = generator
        self.policy = policy
        self.task_features = task_features
        self.seed = seed

    def __call__(self, task: TaskRecord) -> Decomposition:
        candidates = self.generator.generate(task, self.policy.n_actions, derive_seed(self.seed, task.task_id))
        choice = choose_actions(self.policy, self.task_features(task))[0]
        return candidates[min(choice, len(candidates) - 1)]


@dataclass
class RoutingTrace:
    task_id: str
    decomposition: Decomposition
    scheme: AllocationScheme
    steps: list
    final_answer: str
    acc: int
    cost_microcents: int
    prm_cost_microcents: int
    latency_ms: float
    labels: list[int] | None = field(default=None, repr=False)

    @property
    def cost_cents(self) -> float:
        return self.cost_microcents / MICROCENTS_PER_CENT

    def to_json(self) -> dict:
        d = self.decomposition
        return {
            "task_id": self.task_id,
            "decomposition": {
                "subtasks": d.texts,
                "strategy": d.strategy,
                "coe_pairs": d.coe_pairs,
                "correctness": d.correctness,
                "score": d.score,
            },
            "scheme": list(self.scheme.assignments),
            "steps": [s.to_json() for s in self.steps],
            "final_answer": self.final_answer,
            "acc": self.acc,
            "cost_microcents": self.cost_microcents,
            "cost_cents": self.cost_cents,
            "prm_cost_microcents": self.prm_cost_microcents,
            "latency_ms": round(self.latency_ms, 3),
        }


def route_task(
    task: TaskRecord,
    decomposer: Decomposer,
    allocator: Allocator,
    executor: SubtaskExecutor,
    checker: AnswerChecker,
    pool: ModelPool,
    prm: PrmConfig | None = None,
    reviewer: Reviewer | None = None,
    integrator: Integrator = last_result,
    seed: int = 0,
) -> RoutingTrace:
    prm = prm or PrmConfig()
    prm.validate(pool)
    d = decomposer(task)
    ids = allocator.allocate(task, d)
    if len(ids) != d.k or any(not 0 <= i < len(pool) for i in ids):
        raise ValueError(f"{task.task_id}: allocator returned an invalid scheme {ids}")
    result = run_chain(task, d, ids, pool, executor, checker, prm, reviewer, integrator,
                       derive_seed(seed, task.task_id))
    scheme = AllocationScheme(task.task_id, ids, result.acc, result.cost_microcents)
    return RoutingTrace(
        task.task_id, d, scheme, result.steps, result.final_answer, result.acc,
        result.cost_microcents, result.prm_cost_microcents, result.latency_ms,
    )


def route_many(tasks, workers: int = 1, **kwargs) -> list[RoutingTrace]:
    """Route tasks concurrently; output order follows input order."""
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            return list(ex.map(lambda t: route_task(t, **kwargs), tasks))
    return [route_task(t, **kwargs) for t in tasks]


# -- metrics -----------------------------------------------------------------


def mean_abs_index_error(predicted, labels) -> float:
    if len(predicted) != len(labels):
        raise LabelMismatch(f"{len(predicted)} predictions vs {len(labels)} labels")
    if not predicted:
        raise LabelMismatch("no labelled subtasks")
    return sum(abs(int(p) - int(q)) for p, q in zip(predicted, labels)) / len(predicted)


@dataclass
class MetricsReport:
    acc: float
    c_api_cents: float
    n_tasks: int
    mae: float | None = None
    c_d: float | None = None
    mean_score: float | None = None
    prm_cost_cents: float = 0.0
    n_labeled_subtasks: int = 0
    n_baseline: int = 0
    n_scored: int = 0

    def __post_init__(self):
        if not 0.0 <= self.acc <= 1.0:
            raise ValueError("acc must lie in [0, 1]")
        if self.c_api_cents < 0:
            raise ValueError("c_api must be non-negative")

    def to_json(self) -> dict:
        return {
            "acc": self.acc,
            "c_api_cents": self.c_api_cents,
            "mae": self.mae,
            "c_d": self.c_d,
            "mean_score": self.mean_score,
            "n_tasks": self.n_tasks,
            "prm_cost_cents": self.prm_cost_cents,
            "n_labeled_subtasks": self.n_labeled_subtasks,
        }

    def merge(self, other: "MetricsReport") -> "MetricsReport":
        """Combine reports over disjoint task sets (count-weighted means)."""

        def wmean(a, na, b, nb):
            if na + nb == 0:
                return None
            return ((a or 0.0) * na + (b or 0.0) * nb) / (na + nb)

        n = self.n_tasks + other.n_tasks
        return MetricsReport(
            acc=wmean(self.acc, self.n_tasks, other.acc, other.n_tasks),
            c_api_cents=wmean(self.c_api_cents, self.n_tasks, other.c_api_cents, other.n_tasks),
            n_tasks=n,
            mae=wmean(self.mae, self.n_labeled_subtasks, other.mae, other.n_labeled_subtasks),
            c_d=wmean(self.c_d, self.n_baseline, other.c_d, other.n_baseline),
            mean_score=wmean(self.mean_score, self.n_scored, other.mean_score, other.n_scored),
            prm_cost_cents=wmean(self.prm_cost_cents, self.n_tasks, other.prm_cost_cents, other.n_tasks),
            n_labeled_subtasks=self.n_labeled_subtasks + other.n_labeled_subtasks,
            n_baseline=self.n_baseline + other.n_baseline,
            n_scored=self.n_scored + other.n_scored,
        )


def compute_metrics(
    traces: list[RoutingTrace],
    labels: dict[str, list[int]] | None = None,
    baseline_traces: list[RoutingTrace] | None = None,
) -> MetricsReport:
    """Accuracy, mean API cost, MAE against labels, decomposer correctness and score.

    ``baseline_traces`` are the same decompositions routed entirely to the
    designated baseline model; their accuracy is ``c_d``. Tasks without a
    label are left out of the MAE.
    """
    if not traces:
        raise EmptyTraces("no traces to summarise")
    n = len(traces)
    acc = sum(t.acc for t in traces) / n
    cost = sum(t.cost_microcents for t in traces) / n / MICROCENTS_PER_CENT
    prm_cost = sum(t.prm_cost_microcents for t in traces) / n / MICROCENTS_PER_CENT

    mae, n_labeled = None, 0
    if labels is not None:
        preds, golds = [], []
        for t in traces:
            gold = labels.get(t.task_id)
            if gold is None:
                continue
            if len(gold) != len(t.scheme.assignments):
                raise LabelMismatch(f"{t.task_id}: {len(t.scheme.assignments)} subtasks vs {len(gold)} labels")
            preds.extend(t.scheme.assignments)
            golds.extend(gold)
        if preds:
            mae = mean_abs_index_error(preds, golds)
            n_labeled = len(preds)

    c_d, n_base = None, 0
    if baseline_traces:
        n_base = len(baseline_traces)
        c_d = sum(t.acc for t in baseline_traces) / n_base

    scores = [t.decomposition.score for t in traces if t.decomposition.score is not None]
    mean_score = sum(scores) / len(scores) if scores else None
    if mean_score is not None and math.isnan(mean_score):
        mean_score = None
    return MetricsReport(acc, cost, n, mae, c_d, mean_score, prm_cost, n_labeled, n_base, len(scores))
