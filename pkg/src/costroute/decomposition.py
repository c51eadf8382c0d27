"""Decomposition scoring, correctness checks and rejection-sampled dataset building."""

from __future__ import annotations

import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

from .core import (
    AnswerChecker,
    CoherenceJudge,
    Decomposition,
    DecompositionGenerator,
    SubtaskExecutor,
    TaskRecord,
)
from .errors import (
    EmptySampleSet,
    GeneratorFailure,
    JudgeUnavailable,
    MissingCoherence,
    MissingTokenCounts,
    RouterError,
)
from .execution import derive_seed, run_chain
from .pool import ModelPool

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScoreWeights:
    w_c: float = 1.0
    w_p: float = 0.01
    w_d: float = 5.0

    def __post_init__(self):
        if min(self.w_c, self.w_p, self.w_d) <= 0:
            raise ValueError("score weights must all be positive")

    def scaled(self, factor: float) -> "ScoreWeights":
        return ScoreWeights(self.w_c * factor, self.w_p * factor, self.w_d * factor)

    def to_json(self) -> dict:
        return {"w_c": self.w_c, "w_p": self.w_p, "w_d": self.w_d}


@dataclass
class DecompDatasetEntry:
    task_id: str
    task_text: str
    chosen: Decomposition
    rejected_count: int
    weights: ScoreWeights

    def __post_init__(self):
        if self.chosen.score is None:
            raise ValueError("dataset entries must carry a scored decomposition")

    def to_json(self) -> dict:
        d = self.chosen
        return {
            "task_id": self.task_id,
            "task": self.task_text,
            "subtasks": d.texts,
            "k": d.k,
            "tokens_total": d.tokens_total,
            "coe_pairs": d.coe_pairs,
            "correctness": d.correctness,
            "score": d.score,
            "weights": self.weights.to_json(),
        }


def score_decomposition(d: Decomposition, w: ScoreWeights) -> float:
    """Weighted subtask count + evaluation-model tokens + incoherent pairs; lower is better."""
    if d.coe_pairs is None:
        raise MissingCoherence(f"{d.task_id}: coherence not evaluated")
    tokens = d.tokens_total
    if tokens is None:
        raise MissingTokenCounts(f"{d.task_id}: some subtasks lack evaluation token counts")
    d.score = w.w_c * d.k + w.w_p * tokens + w.w_d * d.coe_pairs
    return d.score


_WORD = re.compile(r"[a-z0-9_]+")
STOPWORDS = frozenset(
    """
    a an the and or of to in on for by with from into at as is are be was were it its this that
    these those then than so if not no do does did can could should would will what which who
    how why when where step steps first next finally last result results answer use using used
    given compute calculate determine find get obtain solve previous based each all any same
    """.split()
)


def content_tokens(text: str) -> set[str]:
    return {t for t in _WORD.findall(text.lower()) if t not in STOPWORDS and not t.isdigit()}


class LexicalJudge:
    """Flags an adjacent pair as unrelated when they share no content token.

    The task text is accepted for interface compatibility and ignored.
    """

    def unrelated(self, task_text: str, first: str, second: str) -> bool:
        return not (content_tokens(first) & content_tokens(second))


def evaluate_coherence(d: Decomposition, judge: CoherenceJudge, task_text: str = "") -> int:
    """Count adjacent subtask pairs the judge flags as unrelated."""
    count = 0
    texts = d.texts
    for a, b in zip(texts, texts[1:]):
        try:
            flagged = judge.unrelated(task_text, a, b)
        except JudgeUnavailable:
            raise
        except Exception as exc:
            raise JudgeUnavailable(str(exc)) from exc
        count += int(bool(flagged))
    d.coe_pairs = count
    return count


def check_correctness(
    task: TaskRecord,
    d: Decomposition,
    executor: SubtaskExecutor,
    checker: AnswerChecker,
    pool: ModelPool,
    model_id: int | None = None,
    seed: int = 0,
) -> int:
    """Solve the task along ``d`` with one baseline model; record per-step tokens.

    Steps that fail count zero tokens and make the decomposition incorrect.
    """
    model_id = pool.eval_model_id if model_id is None else model_id
    result = run_chain(task, d, [model_id] * d.k, pool, executor, checker, seed=seed)
    for sub, step in zip(d.subtasks, result.steps):
        sub.token_count_eval = step.usage.total
    d.correctness = result.acc
    return result.acc


def _rank_key(item):
    order, d = item
    return (d.score, d.k, order)


def select_best(samples: list[Decomposition]) -> Decomposition:
    """Lowest score among correct samples, else lowest score overall.

    Ties prefer fewer subtasks, then earlier generation order.
    """
    if not samples:
        raise EmptySampleSet("no decomposition samples")
    for d in samples:
        if d.score is None or d.correctness is None:
            raise ValueError(f"{d.task_id}: sample is not fully scored")
    indexed = list(enumerate(samples))
    correct = [item for item in indexed if item[1].correctness == 1]
    pool = correct or indexed
    return min(pool, key=_rank_key)[1]


def decompose_and_select(
    task: TaskRecord,
    generator: DecompositionGenerator,
    m: int,
    w: ScoreWeights,
    executor: SubtaskExecutor,
    checker: AnswerChecker,
    judge: CoherenceJudge,
    pool: ModelPool,
    seed: int = 0,
) -> tuple[Decomposition, list[Decomposition]]:
    try:
        samples = generator.generate(task, m, derive_seed(seed, task.task_id, "gen"))
    except GeneratorFailure:
        raise
    except Exception as exc:
        raise GeneratorFailure(f"{task.task_id}: {exc}") from exc
    if not samples:
        raise GeneratorFailure(f"{task.task_id}: generator returned no samples")
    for i, d in enumerate(samples):
        evaluate_coherence(d, judge, task.text)
        check_correctness(task, d, executor, checker, pool, seed=derive_seed(seed, task.task_id, i))
        score_decomposition(d, w)
    return select_best(samples), samples


def build_decomp_dataset(
    tasks: list[TaskRecord],
    generator: DecompositionGenerator,
    m: int,
    w: ScoreWeights,
    executor: SubtaskExecutor,
    checker: AnswerChecker,
    judge: CoherenceJudge,
    pool: ModelPool,
    seed: int = 0,
    workers: int = 1,
) -> list[DecompDatasetEntry]:
    """One rejection-sampled entry per task; tasks whose generator fails are skipped."""
    if m < 1:
        raise ValueError("need at least one sample per task")

    def one(task):
        try:
            best, samples = decompose_and_select(
                task, generator, m, w, executor, checker, judge, pool, seed
            )
        except RouterError as exc:
            log.warning("skipping task %s: %s", task.task_id, exc)
            return None
        return DecompDatasetEntry(task.task_id, task.text, best, len(samples) - 1, w)

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(one, tasks))
    else:
        results = [one(t) for t in tasks]
    return [r for r in results if r is not None]
