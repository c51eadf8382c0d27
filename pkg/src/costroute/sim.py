"""Seeded simulated environment for tests, dataset building and training.

A simulated task is a chain of latent subtasks with difficulties in [0, 1].
Model ``j`` of an ``n``-model pool has capability ``j / (n - 1)`` by default.
In deterministic mode a step succeeds iff capability >= difficulty; in
sigmoid mode it succeeds with probability ``sigmoid(gamma * (cap - d))``.
All randomness comes from explicit seeds.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .allocation import AllocationScheme
from .core import Decomposition, Review, StepOutput, Subtask, TaskRecord
from .errors import InstanceTooLarge
from .execution import derive_seed
from . import kernels
from .pool import ModelPool, ModelSpec, Usage, usage_cost_microcents

MAX_ENUM_K = 3
MAX_ENUM_POOL = 9

TOPICS = (
    "amber basalt cobalt delta ember fjord garnet harbor indigo jasper kelp lagoon magma "
    "nectar onyx prism quartz ridge sierra tundra umber vortex willow xenon yarrow zephyr "
    "anchor beacon canyon dune estuary falcon glacier heron isthmus juniper krill lichen "
    "meadow nimbus orchid pebble"
).split()


class Strategy(int, Enum):
    FAITHFUL = 0
    COARSE = 1
    FINE = 2
    LOSSY = 3


STRATEGIES = tuple(Strategy)


@dataclass(frozen=True)
class SimTask:
    task_id: str
    difficulties: tuple[float, ...]
    tokens: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if not self.difficulties or len(self.difficulties) != len(self.tokens):
            raise ValueError(f"{self.task_id}: need one token profile per latent subtask")
        if any(not 0.0 <= d <= 1.0 for d in self.difficulties):
            raise ValueError(f"{self.task_id}: difficulties must lie in [0, 1]")

    @property
    def k(self) -> int:
        return len(self.difficulties)

    @property
    def answer(self) -> str:
        return f"answer:{self.task_id}"

    def topics(self) -> list[str]:
        rng = np.random.default_rng(derive_seed(self.task_id, "topics"))
        picks = rng.choice(len(TOPICS), size=self.k, replace=self.k > len(TOPICS))
        return [TOPICS[i] for i in picks]

    def to_record(self) -> TaskRecord:
        text = f"Resolve the chain ending in {self.topics()[-1]} ({self.k} parts)."
        return TaskRecord(self.task_id, text, self.answer, "sim", {"sim": self})

    def to_json(self) -> dict:
        return {
            "task_id": self.task_id,
            "difficulties": list(self.difficulties),
            "tokens": [list(t) for t in self.tokens],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "SimTask":
        return cls(
            str(doc["task_id"]),
            tuple(float(x) for x in doc["difficulties"]),
            tuple((int(a), int(b)) for a, b in doc["tokens"]),
        )


def sim_task_of(task: TaskRecord) -> SimTask:
    sim = task.meta.get("sim")
    if sim is None:
        raise ValueError(f"task {task.task_id} is not a simulated task")
    return sim


def gen_tasks(
    seed: int,
    n: int,
    k_range: tuple[int, int] = (1, 3),
    difficulty_dist: str | float = "uniform",
    tokens_in_range: tuple[int, int] = (100, 400),
    tokens_out_range: tuple[int, int] = (50, 300),
) -> list[SimTask]:
    """Generate ``n`` tasks. ``difficulty_dist`` is ``"uniform"`` or a point mass."""
    if n < 1:
        raise ValueError("n must be >= 1")
    lo, hi = k_range
    if not 1 <= lo <= hi:
        raise ValueError(f"bad k range {k_range}")
    rng = np.random.default_rng(seed)
    tasks = []
    for i in range(n):
        k = int(rng.integers(lo, hi + 1))
        if difficulty_dist == "uniform":
            diffs = rng.uniform(0.0, 1.0, size=k)
        else:
            diffs = np.full(k, float(difficulty_dist))
        t_in = rng.integers(tokens_in_range[0], tokens_in_range[1] + 1, size=k)
        t_out = rng.integers(tokens_out_range[0], tokens_out_range[1] + 1, size=k)
        tasks.append(
            SimTask(
                f"sim-{seed}-{i:05d}",
                tuple(float(x) for x in diffs),
                tuple((int(a), int(b)) for a, b in zip(t_in, t_out)),
            )
        )
    return tasks


class Mode(str, Enum):
    DETERMINISTIC = "deterministic"
    SIGMOID = "sigmoid"


@dataclass(frozen=True)
class SimModelBehavior:
    mode: Mode = Mode.DETERMINISTIC
    gamma: float = 8.0
    capabilities: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        caps = self.capabilities
        if caps is not None and any(b < a for a, b in zip(caps, caps[1:])):
            raise ValueError("capabilities must be nondecreasing in rank")

    def capability(self, model_id: int, pool_size: int) -> float:
        if self.capabilities is not None:
            return self.capabilities[model_id]
        return model_id / (pool_size - 1) if pool_size > 1 else 1.0


@dataclass(frozen=True)
class SimStepResult:
    correct: bool
    usage: Usage


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def simulate_step(
    difficulty: float,
    model_id: int,
    behavior: SimModelBehavior,
    seed: int,
    pool_size: int,
    tokens: tuple[int, int] = (0, 0),
) -> SimStepResult:
    cap = behavior.capability(model_id, pool_size)
    if behavior.mode is Mode.DETERMINISTIC:
        correct = cap >= difficulty
    else:
        p = _sigmoid(behavior.gamma * (cap - difficulty))
        correct = bool(np.random.default_rng(seed).random() < p)
    return SimStepResult(bool(correct), Usage(int(tokens[0]), int(tokens[1])))


def sim_token_probs(n_tokens: int, difficulty: float, seed: int, noise: float = 0.03) -> list[float]:
    """Per-token probabilities centred on ``1 - difficulty`` with bounded noise."""
    if n_tokens < 1:
        raise ValueError("need at least one token")
    rng = np.random.default_rng(seed)
    jitter = noise * np.clip(rng.standard_normal(n_tokens), -3.0, 3.0)
    return np.clip(1.0 - difficulty + jitter, 0.0, 1.0).tolist()


# -- decomposition strategies ------------------------------------------------


def _piece(idx, text, difficulty, tokens, lossy=False):
    return Subtask(idx, text, meta={"difficulty": float(difficulty), "tokens": tuple(tokens), "lossy": lossy})


def sim_decompose(task: SimTask, strategy: Strategy = Strategy.FAITHFUL) -> Decomposition:
    """Build one candidate decomposition of ``task`` in the given style.

    coarse merges adjacent latent steps (harder, fewer steps), fine splits each
    step in two (slightly easier, more tokens), lossy drops a step and can
    never produce the right answer.
    """
    strategy = Strategy(strategy)
    topics = task.topics()
    diffs, toks = task.difficulties, task.tokens
    pieces: list[tuple[str, float, tuple[int, int]]] = []
    lossy = False
    if strategy is Strategy.FAITHFUL or (strategy is Strategy.COARSE and task.k == 1):
        prev = "input"
        for t, d, tk in zip(topics, diffs, toks):
            pieces.append((f"determine {t} from {prev}", d, tk))
            prev = t
    elif strategy is Strategy.COARSE:
        prev = "input"
        for i in range(0, task.k, 2):
            group = list(range(i, min(i + 2, task.k)))
            names = " and ".join(topics[j] for j in group)
            d = min(1.0, max(diffs[j] for j in group) + (0.1 if len(group) > 1 else 0.0))
            tk = (sum(toks[j][0] for j in group), sum(toks[j][1] for j in group))
            pieces.append((f"determine {names} from {prev}", d, tk))
            prev = topics[group[-1]]
    elif strategy is Strategy.FINE:
        prev = "input"
        for t, d, (a, b) in zip(topics, diffs, toks):
            half = (math.ceil(0.6 * a), math.ceil(0.6 * b))
            pieces.append((f"determine partial {t} from {prev}", 0.85 * d, half))
            pieces.append((f"complete {t} from partial {t}", 0.85 * d, half))
            prev = t
    else:
        lossy = True
        keep = list(range(task.k))
        if task.k >= 3:
            keep.pop(task.k // 2)
        elif task.k == 2:
            keep.pop()
        prev = "input"
        for j in keep:
            src = prev if task.k < 3 else (topics[j - 1] if j > 0 else "input")
            pieces.append((f"determine {topics[j]} from {src}", diffs[j], toks[j]))
            prev = topics[j]
    subtasks = [_piece(i, text, d, tk, lossy) for i, (text, d, tk) in enumerate(pieces)]
    subtasks[-1].meta["is_last"] = True
    return Decomposition(task.task_id, subtasks, strategy=int(strategy))


class SimDecompositionGenerator:
    """Produces the first ``m`` strategies (cycled) as candidates."""

    def generate(self, task: TaskRecord, m: int, seed: int) -> list[Decomposition]:
        sim = sim_task_of(task)
        return [sim_decompose(sim, STRATEGIES[i % len(STRATEGIES)]) for i in range(m)]


class SimExecutor:
    """Runs subtasks against the simulated pool; also serves as PRM reviewer.

    Step results are ``<task>#<i>:ok`` or ``<task>#<i>:wrong``; the last step
    emits the task answer only when every step in the chain was right.
    """

    def __init__(self, pool: ModelPool, behavior: SimModelBehavior | None = None,
                 ms_per_token: float = 2.0):
        self.pool = pool
        self.behavior = behavior or SimModelBehavior()
        self.ms_per_token = ms_per_token

    def _content(self, task: TaskRecord, subtask: Subtask, own_ok: bool, history: list[str]) -> str:
        upstream_ok = all(h.endswith(":ok") for h in history)
        if subtask.meta.get("is_last"):
            if own_ok and upstream_ok and not subtask.meta.get("lossy"):
                return str(task.ground_truth)
            return f"{task.task_id}#{subtask.index}:wrong"
        return f"{task.task_id}#{subtask.index}:{'ok' if own_ok else 'wrong'}"

    def run_step(self, task, subtask, model: ModelSpec, history, seed) -> StepOutput:
        d = subtask.meta["difficulty"]
        tokens = subtask.meta["tokens"]
        res = simulate_step(d, model.id, self.behavior, seed, len(self.pool), tokens)
        latency = tokens[1] * self.ms_per_token * (1 + model.capability_rank / 4)
        return StepOutput(self._content(task, subtask, res.correct, history), res.usage, res.correct, latency)

    def review(self, task, subtask, result: StepOutput, strong_model: ModelSpec, history, seed) -> Review:
        d = subtask.meta["difficulty"]
        t_in, t_out = subtask.meta["tokens"]
        check = simulate_step(d, strong_model.id, self.behavior, derive_seed(seed, "review"), len(self.pool))
        if result.ok or not check.correct:
            usage = Usage(t_in + t_out, 8)
            return Review(True, None, usage, 8 * self.ms_per_token)
        usage = Usage(t_in + t_out, t_out)
        corrected = StepOutput(self._content(task, subtask, True, history), Usage(), True)
        return Review(False, corrected, usage, t_out * self.ms_per_token)


class SimTokenProbSource:
    def __init__(self, noise: float = 0.03, max_tokens: int = 64):
        self.noise = noise
        self.max_tokens = max_tokens

    def token_probs(self, task: TaskRecord, subtask: Subtask, seed: int) -> list[float]:
        n = max(1, min(int(subtask.meta["tokens"][1]), self.max_tokens))
        return sim_token_probs(n, subtask.meta["difficulty"], seed, self.noise)


def brute_force_optimal(
    task: SimTask | Decomposition,
    pool: ModelPool,
    behavior: SimModelBehavior | None = None,
) -> AllocationScheme:
    """Cheapest all-correct scheme by exhaustive enumeration (deterministic mode).

    Ties go to the lexicographically smallest id vector. Returns a scheme with
    ``acc=0`` and no assignments when nothing succeeds.
    """
    behavior = behavior or SimModelBehavior()
    if behavior.mode is not Mode.DETERMINISTIC:
        raise ValueError("brute-force oracle needs the deterministic simulator")
    if isinstance(task, SimTask):
        task = sim_decompose(task)
    d = task
    k, n = d.k, len(pool)
    if k > MAX_ENUM_K or n > MAX_ENUM_POOL:
        raise InstanceTooLarge(f"{n}^{k} schemes exceeds the {MAX_ENUM_POOL}^{MAX_ENUM_K} bound")
    step_cost = np.zeros((k, n), dtype=np.int64)
    feasible = np.zeros((k, n), dtype=np.uint8)
    for i, sub in enumerate(d.subtasks):
        usage = Usage(*sub.meta["tokens"])
        for j, model in enumerate(pool):
            step_cost[i, j] = usage_cost_microcents(usage, model)
            feasible[i, j] = behavior.capability(j, n) >= sub.meta["difficulty"]
    ids, cost, found = kernels.min_cost_scheme(step_cost, feasible)
    if not found or d.subtasks[-1].meta.get("lossy"):
        return AllocationScheme(d.task_id, [], acc=0, cost_microcents=0)
    return AllocationScheme(d.task_id, ids, acc=1, cost_microcents=cost)


def sim_components(pool: ModelPool, behavior: SimModelBehavior | None = None):
    """Executor, checker and probability source wired for simulated tasks."""
    from .core import ExactMatchChecker

    return SimExecutor(pool, behavior), ExactMatchChecker(), SimTokenProbSource()


def faithful_decomposer(task: TaskRecord) -> Decomposition:
    return sim_decompose(sim_task_of(task), Strategy.FAITHFUL)


def read_sim_tasks(path) -> list[SimTask]:
    with open(path) as fh:
        return [SimTask.from_json(json.loads(line)) for line in fh if line.strip()]


# -- training environment ----------------------------------------------------

K_NORM = 4.0


def sim_task_features(task: SimTask, prob_source=None, alpha=None, tau1=None, tau2=None,
                      probe_seed: int = 0) -> np.ndarray:
    """Task-level context for the decomposer: hardest latent step's quantile and bucket."""
    from .allocation import DEFAULT_ALPHA, DEFAULT_TAU1, DEFAULT_TAU2, estimate_all
    from .grpo import featurize

    prob_source = prob_source or SimTokenProbSource()
    alpha = DEFAULT_ALPHA if alpha is None else alpha
    tau1 = DEFAULT_TAU1 if tau1 is None else tau1
    tau2 = DEFAULT_TAU2 if tau2 is None else tau2
    d = sim_decompose(task)
    est = estimate_all(task.to_record(), d, prob_source, alpha, tau1, tau2, probe_seed)
    hardest = min(est, key=lambda e: e.quantile_value)
    x = featurize([hardest.quantile_value], [hardest.bucket], ["x"])[0]
    x[4] = 0.0
    x[5] = min(1.0, task.k / K_NORM)
    return x


class SimRoutingEnv:
    """Routing environment over simulated tasks for co-training.

    ``run`` reproduces what :func:`~costroute.execution.run_chain` with a
    :class:`SimExecutor` would report for the same seed, without building
    traces.
    """

    def __init__(self, tasks: list[SimTask], pool: ModelPool, behavior: SimModelBehavior | None = None,
                 alpha=None, tau1=None, tau2=None, probe_seed: int = 0,
                 strategies=STRATEGIES):
        from .allocation import DEFAULT_ALPHA, DEFAULT_TAU1, DEFAULT_TAU2, estimate_all
        from .grpo import featurize

        self.tasks = list(tasks)
        self.pool = pool
        self.behavior = behavior or SimModelBehavior()
        self.strategies = tuple(Strategy(s) for s in strategies)
        alpha = DEFAULT_ALPHA if alpha is None else alpha
        tau1 = DEFAULT_TAU1 if tau1 is None else tau1
        tau2 = DEFAULT_TAU2 if tau2 is None else tau2
        prob_source = SimTokenProbSource()
        n = len(pool)
        self.caps = [self.behavior.capability(j, n) for j in range(n)]
        self._task_x, self._cands, self._sub_x, self._costs = [], [], [], []
        for task in self.tasks:
            record = task.to_record()
            self._task_x.append(sim_task_features(task, prob_source, alpha, tau1, tau2, probe_seed))
            cands, xs, costs = [], [], []
            for strat in self.strategies:
                d = sim_decompose(task, strat)
                est = estimate_all(record, d, prob_source, alpha, tau1, tau2, probe_seed)
                xs.append(featurize([e.quantile_value for e in est], [e.bucket for e in est], d.texts))
                costs.append([
                    [usage_cost_microcents(Usage(*s.meta["tokens"]), m) for m in pool]
                    for s in d.subtasks
                ])
                cands.append(d)
            self._cands.append(cands)
            self._sub_x.append(xs)
            self._costs.append(costs)

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    @property
    def n_candidates(self) -> int:
        return len(self.strategies)

    def candidate(self, t: int, c: int) -> Decomposition:
        return self._cands[t][c]

    def task_features(self, t: int) -> np.ndarray:
        return self._task_x[t]

    def subtask_features(self, t: int, candidate: int) -> np.ndarray:
        return self._sub_x[t][candidate]

    def step_ok(self, difficulty: float, model_id: int, step_seed: int) -> bool:
        cap = self.caps[model_id]
        if self.behavior.mode is Mode.DETERMINISTIC:
            return cap >= difficulty
        p = _sigmoid(self.behavior.gamma * (cap - difficulty))
        return bool(np.random.default_rng(step_seed).random() < p)

    def run(self, t: int, candidate: int, scheme, seed: int) -> tuple[int, int]:
        d = self._cands[t][candidate]
        costs = self._costs[t][candidate]
        ok = True
        cost = 0
        for sub, m in zip(d.subtasks, scheme):
            cost += costs[sub.index][m]
            if not self.step_ok(sub.meta["difficulty"], m, derive_seed(seed, sub.index, m)):
                ok = False
        reward = int(ok and not d.subtasks[-1].meta["lossy"])
        return reward, cost
