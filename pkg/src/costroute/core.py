"""Shared records and the small interfaces the pipeline is wired from."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Protocol

from .pool import ModelSpec, Usage

FAILURE_MARKER = "<step-failed>"


@dataclass(frozen=True)
class TaskRecord:
    task_id: str
    text: str
    ground_truth: Any = None
    benchmark_tag: str = ""
    meta: dict = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        if not self.text:
            raise ValueError(f"task {self.task_id} has empty text")


@dataclass
class Subtask:
    index: int
    text: str
    token_count_eval: int | None = None
    # free-form payload for executors (simulated difficulty, token profile, ...)
    meta: dict = field(default_factory=dict)


@dataclass
class Decomposition:
    task_id: str
    subtasks: list[Subtask]
    coe_pairs: int | None = None
    correctness: int | None = None
    score: float | None = None
    # which generator strategy produced this candidate, when known
    strategy: int | None = None

    def __post_init__(self):
        if not self.subtasks:
            raise ValueError("a decomposition needs at least one subtask")
        for i, s in enumerate(self.subtasks):
            if s.index != i:
                raise ValueError("subtask indices must be contiguous from 0")

    @property
    def k(self) -> int:
        return len(self.subtasks)

    @property
    def texts(self) -> list[str]:
        return [s.text for s in self.subtasks]

    @property
    def tokens_total(self) -> int | None:
        counts = [s.token_count_eval for s in self.subtasks]
        if any(c is None for c in counts):
            return None
        return sum(counts)


@dataclass(frozen=True)
class StepOutput:
    content: str
    usage: Usage = Usage()
    # executor's own verdict on the step, when it can tell (simulators can)
    ok: bool | None = None
    latency_ms: float = 0.0


@dataclass(frozen=True)
class Review:
    accepted: bool
    corrected: StepOutput | None
    usage: Usage = Usage()
    latency_ms: float = 0.0


class SubtaskExecutor(Protocol):
    def run_step(
        self,
        task: TaskRecord,
        subtask: Subtask,
        model: ModelSpec,
        history: list[str],
        seed: int,
    ) -> StepOutput: ...


class Reviewer(Protocol):
    def review(
        self,
        task: TaskRecord,
        subtask: Subtask,
        result: StepOutput,
        strong_model: ModelSpec,
        history: list[str],
        seed: int,
    ) -> Review: ...


class AnswerChecker(Protocol):
    def check(self, task: TaskRecord, answer: str) -> bool: ...


class CoherenceJudge(Protocol):
    def unrelated(self, task_text: str, first: str, second: str) -> bool: ...


class DecompositionGenerator(Protocol):
    def generate(self, task: TaskRecord, m: int, seed: int) -> list[Decomposition]: ...


class TokenProbSource(Protocol):
    def token_probs(self, task: TaskRecord, subtask: Subtask, seed: int) -> list[float]: ...


Integrator = Callable[[TaskRecord, list[str]], str]


def last_result(task: TaskRecord, results: list[str]) -> str:
    """Default integration: the final step's result is the answer."""
    return results[-1]


class ExactMatchChecker:
    def check(self, task: TaskRecord, answer: str) -> bool:
        return str(answer).strip() == str(task.ground_truth).strip()
