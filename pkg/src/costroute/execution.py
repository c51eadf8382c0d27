"""Sequential chain execution with optional procedural review.

A chain runs every subtask in order, feeding each final result forward. A
step that raises is recorded with a failure marker and the chain keeps going,
so the cost ledger reflects every call that was actually made.
"""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field

import numpy as np

from .core import (
    FAILURE_MARKER,
    AnswerChecker,
    Decomposition,
    Integrator,
    Reviewer,
    StepOutput,
    SubtaskExecutor,
    TaskRecord,
    last_result,
)
from .errors import ExecutorFailure, PoolConfigError
from .pool import ModelPool, ModelSpec, Usage, usage_cost_microcents

log = logging.getLogger(__name__)


def stable_hash(text: str) -> int:
    return zlib.crc32(text.encode("utf-8"))


def derive_seed(*parts) -> int:
    """Mix ints/strings into a 63-bit seed; independent of ``PYTHONHASHSEED``."""
    words = [stable_hash(p) if isinstance(p, str) else int(p) & 0xFFFFFFFF for p in parts]
    return int(np.random.SeedSequence(words).generate_state(2, dtype=np.uint64)[0] >> 1)


@dataclass(frozen=True)
class PrmConfig:
    enabled: bool = False
    strong_model_id: int | None = None
    threshold_model_id: int | None = None

    def validate(self, pool: ModelPool) -> None:
        if not self.enabled:
            return
        if self.strong_model_id is None or self.threshold_model_id is None:
            raise PoolConfigError("PRM needs both a strong model and a threshold model")
        strong = pool.resolve(self.strong_model_id)
        thresh = pool.resolve(self.threshold_model_id)
        if strong.capability_rank < thresh.capability_rank:
            raise PoolConfigError("strong model must be at least as capable as the threshold")


@dataclass
class StepRecord:
    index: int
    model_id: int
    raw_result: str
    final_result: str
    usage: Usage
    cost_microcents: int
    prm_applied: bool = False
    prm_usage: Usage = field(default_factory=Usage)
    prm_cost_microcents: int = 0
    prm_warning: bool = False
    failed: bool = False
    ok: bool | None = None
    latency_ms: float = 0.0

    def to_json(self) -> dict:
        return {
            "model_id": self.model_id,
            "raw_result": self.raw_result,
            "prm_applied": self.prm_applied,
            "final_result": self.final_result,
            "usage": {"in": self.usage.tokens_in, "out": self.usage.tokens_out},
            "cost_microcents": self.cost_microcents,
            "prm_usage": {"in": self.prm_usage.tokens_in, "out": self.prm_usage.tokens_out},
            "prm_cost_microcents": self.prm_cost_microcents,
            "prm_warning": self.prm_warning,
            "failed": self.failed,
        }


@dataclass
class ChainResult:
    steps: list[StepRecord]
    final_answer: str
    acc: int
    first_failure: int | None
    latency_ms: float

    @property
    def cost_microcents(self) -> int:
        return sum(s.cost_microcents + s.prm_cost_microcents for s in self.steps)

    @property
    def prm_cost_microcents(self) -> int:
        return sum(s.prm_cost_microcents for s in self.steps)


def prm_verify(
    task: TaskRecord,
    subtask,
    raw: StepOutput,
    assigned: ModelSpec,
    prm: PrmConfig,
    pool: ModelPool,
    reviewer: Reviewer,
    history: list[str],
    seed: int,
):
    """Review a step result with the strong model when the assignee is below threshold.

    Returns ``(final_output, applied, review_usage, warning, latency_ms)``.
    A reviewer failure lets the raw result through with ``warning`` set.
    """
    thresh = pool.resolve(prm.threshold_model_id)
    if not prm.enabled or assigned.capability_rank >= thresh.capability_rank:
        return raw, False, Usage(), False, 0.0
    strong = pool.resolve(prm.strong_model_id)
    try:
        review = reviewer.review(task, subtask, raw, strong, history, seed)
    except ExecutorFailure as exc:
        log.warning("strong-model review failed on %s step %d: %s", task.task_id, subtask.index, exc)
        return raw, True, Usage(), True, 0.0
    if review.accepted or review.corrected is None:
        return raw, True, review.usage, False, review.latency_ms
    return review.corrected, True, review.usage, False, review.latency_ms


def run_chain(
    task: TaskRecord,
    decomposition: Decomposition,
    scheme: list[int],
    pool: ModelPool,
    executor: SubtaskExecutor,
    checker: AnswerChecker,
    prm: PrmConfig | None = None,
    reviewer: Reviewer | None = None,
    integrator: Integrator = last_result,
    seed: int = 0,
) -> ChainResult:
    if len(scheme) != decomposition.k:
        raise ValueError(f"scheme has {len(scheme)} entries for {decomposition.k} subtasks")
    prm = prm or PrmConfig()
    if prm.enabled and reviewer is None:
        raise PoolConfigError("PRM enabled without a reviewer")
    history: list[str] = []
    steps: list[StepRecord] = []
    any_failed = False
    for subtask, model_id in zip(decomposition.subtasks, scheme):
        model = pool[model_id]
        step_seed = derive_seed(seed, subtask.index, model_id)
        try:
            raw = executor.run_step(task, subtask, model, list(history), step_seed)
        except ExecutorFailure as exc:
            log.warning("step %d of %s failed on %s: %s", subtask.index, task.task_id, model.name, exc)
            any_failed = True
            steps.append(
                StepRecord(subtask.index, model_id, FAILURE_MARKER, FAILURE_MARKER,
                           Usage(), 0, failed=True, ok=False)
            )
            history.append(FAILURE_MARKER)
            continue
        final, applied, prm_usage, warning, prm_latency = raw, False, Usage(), False, 0.0
        if prm.enabled:
            final, applied, prm_usage, warning, prm_latency = prm_verify(
                task, subtask, raw, model, prm, pool, reviewer, list(history), step_seed
            )
        prm_cost = usage_cost_microcents(prm_usage, pool.resolve(prm.strong_model_id)) if applied else 0
        steps.append(
            StepRecord(
                index=subtask.index,
                model_id=model_id,
                raw_result=raw.content,
                final_result=final.content,
                usage=raw.usage,
                cost_microcents=usage_cost_microcents(raw.usage, model),
                prm_applied=applied,
                prm_usage=prm_usage,
                prm_cost_microcents=prm_cost,
                prm_warning=warning,
                ok=final.ok,
                latency_ms=raw.latency_ms + prm_latency,
            )
        )
        history.append(final.content)
    answer = integrator(task, history)
    acc = int(not any_failed and checker.check(task, answer))
    first_failure = None
    if not acc:
        first_failure = next((s.index for s in steps if s.ok is False), None)
    return ChainResult(steps, answer, acc, first_failure, sum(s.latency_ms for s in steps))
