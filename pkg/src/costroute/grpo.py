"""Group-relative policy optimisation for softmax-linear routing policies.

Both router modules are categorical policies ``pi(a | x) = softmax(W x)``.
The allocator picks a model per subtask, the decomposer picks one candidate
decomposition style per task. A rollout's binary final reward is normalised
within its group and broadcast to every action of that rollout.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from . import kernels
from ._pykernels import log_softmax
from .errors import (
    EmptyBatch,
    EnvFailure,
    GroupTooSmall,
    NonfiniteGradient,
    NonpositiveRatio,
    RouterError,
    SupportMismatch,
)

log = logging.getLogger(__name__)

FEATURE_DIM = 7
TEXT_LEN_NORM = 200.0
_BUCKET_COLUMNS = {"G_E": 1, "G_M": 2, "G_H": 3}


def featurize(quantiles, buckets, texts) -> np.ndarray:
    """Per-subtask features: quantile, bucket one-hot, position, text length, bias."""
    k = len(quantiles)
    x = np.zeros((k, FEATURE_DIM))
    for i, (q, b, text) in enumerate(zip(quantiles, buckets, texts)):
        x[i, 0] = q
        x[i, _BUCKET_COLUMNS[getattr(b, "value", b)]] = 1.0
        x[i, 4] = i / (k - 1) if k > 1 else 0.0
        x[i, 5] = min(1.0, len(text) / TEXT_LEN_NORM)
        x[i, 6] = 1.0
    return x


@dataclass
class PolicyParams:
    weights: np.ndarray
    kind: str = "allocator"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 2 or self.weights.shape[0] < 1:
            raise ValueError("weights must be an (actions, features) matrix")
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("policy weights must be finite")

    @classmethod
    def uniform(cls, n_actions: int, kind: str = "allocator", feature_dim: int = FEATURE_DIM):
        return cls(np.zeros((n_actions, feature_dim)), kind)

    @classmethod
    def prior(cls, n_actions: int, favored: int = 0, mass: float = 0.7,
              kind: str = "decomposer", feature_dim: int = FEATURE_DIM):
        """Context-free policy putting ``mass`` on one action and spreading the rest.

        The bias is the last feature column.
        """
        if not 0 < mass < 1 or n_actions < 2:
            raise ValueError("need 0 < mass < 1 and at least two actions")
        probs = np.full(n_actions, (1.0 - mass) / (n_actions - 1))
        probs[favored] = mass
        w = np.zeros((n_actions, feature_dim))
        w[:, -1] = np.log(probs) - np.log(probs).mean()
        return cls(w, kind)

    @property
    def n_actions(self) -> int:
        return self.weights.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.weights.shape[1]

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.weights.copy(), self.kind)

    def logits(self, x: np.ndarray) -> np.ndarray:
        return np.atleast_2d(x) @ self.weights.T

    def log_probs(self, x: np.ndarray) -> np.ndarray:
        return log_softmax(self.logits(x))

    def probs(self, x: np.ndarray) -> np.ndarray:
        return np.exp(self.log_probs(x))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(dump_policy(self))

    @classmethod
    def load(cls, path) -> "PolicyParams":
        with open(path) as fh:
            return parse_policy(fh.read())


def dump_policy(params: PolicyParams) -> str:
    header = {
        "action_space": {"kind": params.kind, "size": params.n_actions},
        "feature_dim": params.feature_dim,
    }
    rows = [" ".join(repr(float(v)) for v in row) for row in params.weights]
    return json.dumps(header) + "\n" + "\n".join(rows) + "\n"


def parse_policy(text: str) -> PolicyParams:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    header = json.loads(lines[0])
    weights = np.array([[float(v) for v in ln.split()] for ln in lines[1:]])
    size, dim = header["action_space"]["size"], header["feature_dim"]
    if weights.shape != (size, dim):
        raise ValueError(f"checkpoint body {weights.shape} does not match header ({size}, {dim})")
    return PolicyParams(weights, header["action_space"]["kind"])


# -- objective pieces --------------------------------------------------------


def group_advantages(rewards) -> np.ndarray:
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise GroupTooSmall("group-relative advantages need at least two rollouts")
    std = r.std()
    if std == 0.0:
        return np.zeros_like(r)
    return (r - r.mean()) / std


def clipped_step_objective(ratio: float, adv: float, eps: float) -> float:
    if ratio <= 0:
        raise NonpositiveRatio(f"probability ratio must be positive, got {ratio}")
    clipped = min(max(ratio, 1.0 - eps), 1.0 + eps)
    return min(ratio * adv, clipped * adv)


def kl_penalty(policy_probs, ref_probs) -> float:
    """KL(policy || ref) in nats, with 0 log 0 = 0."""
    p = np.asarray(policy_probs, dtype=np.float64)
    q = np.asarray(ref_probs, dtype=np.float64)
    if p.shape != q.shape:
        raise SupportMismatch("distributions live on different action spaces")
    mask = p > 0
    if np.any(q[mask] <= 0):
        raise SupportMismatch("reference assigns zero mass where the policy does not")
    return float(max(0.0, np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask])))))


# -- rollouts ----------------------------------------------------------------


@dataclass
class Rollout:
    actions: list[int]
    features: np.ndarray  # (steps, feature_dim)
    logprobs_old: np.ndarray
    reward: int
    cost_microcents: int = 0


@dataclass
class TrajectoryGroup:
    context_id: str
    rollouts: list[Rollout]
    advantages: np.ndarray = field(default=None)

    def __post_init__(self):
        if len(self.rollouts) < 2:
            raise GroupTooSmall(f"{self.context_id}: a group needs at least two rollouts")
        if self.advantages is None:
            self.advantages = group_advantages([r.reward for r in self.rollouts])


@dataclass
class GrpoConfig:
    group_size: int = 8
    clip_eps: float = 0.2
    kl_beta: float = 0.01
    learning_rate: float = 0.05
    iterations: int = 30
    batch_size: int = 64
    inner_steps: int = 4
    ref_policy: PolicyParams | None = None

    def __post_init__(self):
        if self.group_size < 2:
            raise GroupTooSmall("group_size must be >= 2")
        if not 0 < self.clip_eps < 1:
            raise ValueError("clip_eps must lie in (0, 1)")
        if self.kl_beta < 0:
            raise ValueError("kl_beta must be >= 0")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")


def _flatten(batch: list[TrajectoryGroup]):
    feats, actions, old, adv, weight = [], [], [], [], []
    n_groups = len(batch)
    for group in batch:
        g = len(group.rollouts)
        for rollout, a in zip(group.rollouts, group.advantages):
            steps = len(rollout.actions)
            if steps == 0:
                continue
            feats.append(rollout.features)
            actions.extend(rollout.actions)
            old.append(rollout.logprobs_old)
            adv.extend([a] * steps)
            weight.extend([1.0 / (n_groups * g * steps)] * steps)
    return (
        np.vstack(feats),
        np.asarray(actions, dtype=np.int64),
        np.concatenate(old).astype(np.float64),
        np.asarray(adv, dtype=np.float64),
        np.asarray(weight, dtype=np.float64),
    )


def grpo_objective_and_gradient(
    batch: list[TrajectoryGroup],
    params: PolicyParams,
    cfg: GrpoConfig,
    ref: PolicyParams | None = None,
):
    """Clipped surrogate minus KL, averaged per step, rollout and group.

    Returns ``(objective, gradient, kl)``; the gradient has the shape of
    ``params.weights``. ``ref`` defaults to ``cfg.ref_policy`` and then to
    ``params`` itself.
    """
    if not batch:
        raise EmptyBatch("no trajectory groups")
    ref = ref or cfg.ref_policy or params
    x, actions, old, adv, weight = _flatten(batch)
    logits = params.logits(x)
    ref_logp = ref.log_probs(x)
    objective, kl, dlogits = kernels.grpo_terms(
        logits, actions, old, ref_logp, adv, weight, cfg.clip_eps, cfg.kl_beta
    )
    grad = np.asarray(dlogits).T @ x
    return float(objective), grad, float(kl)


def update_policy(params: PolicyParams, batch, cfg: GrpoConfig, ref: PolicyParams | None = None):
    """One gradient-ascent step on the objective; returns new params."""
    _, grad, _ = grpo_objective_and_gradient(batch, params, cfg, ref)
    if not np.all(np.isfinite(grad)):
        raise NonfiniteGradient("objective gradient has non-finite entries")
    return PolicyParams(params.weights + cfg.learning_rate * grad, params.kind)


# -- supervised warm start ---------------------------------------------------


def fit_supervised(
    params: PolicyParams,
    x: np.ndarray,
    y: np.ndarray,
    l2: float = 1e-7,
    max_iter: int = 5000,
) -> PolicyParams:
    """Maximum-likelihood fit of the categorical policy to labelled actions."""
    from scipy.optimize import minimize

    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n = len(y)
    if n == 0:
        return params.copy()
    shape = params.weights.shape
    onehot = np.zeros((n, shape[0]))
    onehot[np.arange(n), y] = 1.0

    def nll(flat):
        w = flat.reshape(shape)
        logp = log_softmax(x @ w.T)
        loss = -np.sum(onehot * logp) / n + 0.5 * l2 * np.sum(w * w)
        grad = (np.exp(logp) - onehot).T @ x / n + l2 * w
        return loss, grad.ravel()

    res = minimize(nll, params.weights.ravel(), jac=True, method="L-BFGS-B",
                   options={"maxiter": max_iter})
    return PolicyParams(res.x.reshape(shape), params.kind)


# -- decoding ----------------------------------------------------------------


def choose_actions(params: PolicyParams, x: np.ndarray, decode: str = "greedy",
                   confidence: float = 0.9) -> list[int]:
    """Deterministic action choice.

    ``quantile`` decoding takes the smallest action whose cumulative
    probability reaches ``confidence``; for capability-ordered models it
    trades a little cost for fewer under-powered assignments.
    """
    probs = params.probs(x)
    if decode == "greedy":
        return [int(a) for a in np.argmax(probs, axis=1)]
    if decode == "quantile":
        cdf = np.cumsum(probs, axis=1)
        return [int(min(np.searchsorted(row, confidence), len(row) - 1)) for row in cdf]
    raise ValueError(f"unknown decode mode {decode!r}")


def _sample(rng: np.random.Generator, probs_row: np.ndarray) -> int:
    u = rng.random()
    return int(min(np.searchsorted(np.cumsum(probs_row), u, side="right"), len(probs_row) - 1))


# -- co-training -------------------------------------------------------------


class RoutingEnv(Protocol):
    n_tasks: int
    n_candidates: int

    def task_features(self, t: int) -> np.ndarray: ...

    def subtask_features(self, t: int, candidate: int) -> np.ndarray: ...

    def run(self, t: int, candidate: int, scheme: list[int], seed: int) -> tuple[int, int]: ...


REF_MODES = ("round", "initial")


class CotrainAborted(EnvFailure):
    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


def _rollout_group(env, t, module, decomp, alloc, old, group_size, rng) -> TrajectoryGroup:
    tf = env.task_features(t)
    d_probs = decomp.probs(tf)[0]
    rollouts = []
    for _ in range(group_size):
        c = _sample(rng, d_probs)
        sx = env.subtask_features(t, c)
        a_probs = alloc.probs(sx)
        scheme = [_sample(rng, row) for row in a_probs]
        reward, cost = env.run(t, c, scheme, int(rng.integers(2**62)))
        if module == "decomp":
            feats = np.atleast_2d(tf)
            acts = [c]
        else:
            feats = sx
            acts = scheme
        old_lp = old.log_probs(feats)[np.arange(len(acts)), acts]
        rollouts.append(Rollout(acts, feats, old_lp, int(reward), int(cost)))
    return TrajectoryGroup(f"task-{t}", rollouts)


def evaluate_policies(env, decomp: PolicyParams, alloc: PolicyParams, seed: int = 0,
                      greedy: bool = False, decode: str = "greedy", confidence: float = 0.9):
    """Mean reward and mean cost (cents) over every task in ``env``."""
    rng = np.random.default_rng(seed)
    rewards, costs = [], []
    for t in range(env.n_tasks):
        tf = env.task_features(t)
        if greedy:
            c = choose_actions(decomp, tf)[0]
            scheme = choose_actions(alloc, env.subtask_features(t, c), decode, confidence)
        else:
            c = _sample(rng, decomp.probs(tf)[0])
            scheme = [_sample(rng, row) for row in alloc.probs(env.subtask_features(t, c))]
        r, cost = env.run(t, c, scheme, int(rng.integers(2**62)))
        rewards.append(r)
        costs.append(cost)
    return float(np.mean(rewards)), float(np.mean(costs)) / 1e6


def cotrain(
    decomp_policy: PolicyParams,
    alloc_policy: PolicyParams,
    env: RoutingEnv,
    cfg: GrpoConfig,
    outer_rounds: int,
    seed: int = 0,
    ref_mode: str = "round",
):
    """Alternate GRPO updates: odd rounds train the decomposer, even rounds the allocator.

    The module not being trained is frozen for the whole round. The old
    policy is re-snapshotted before each data-collection pass. The KL
    reference is the module's snapshot at the start of each round
    (``ref_mode="round"``) or its starting policy (``"initial"``).
    """
    if outer_rounds < 1:
        raise ValueError("outer_rounds must be >= 1")
    if ref_mode not in REF_MODES:
        raise ValueError(f"ref_mode must be one of {REF_MODES}")
    rng = np.random.default_rng(seed)
    decomp, alloc = decomp_policy.copy(), alloc_policy.copy()
    initial = {"decomp": decomp.copy(), "alloc": alloc.copy()}
    history = []
    for rnd in range(1, outer_rounds + 1):
        module = "decomp" if rnd % 2 == 1 else "alloc"
        if ref_mode == "initial":
            ref = initial[module]
        else:
            ref = (decomp if module == "decomp" else alloc).copy()
        rewards, costs, objectives, kls = [], [], [], []
        for _ in range(cfg.iterations):
            current = decomp if module == "decomp" else alloc
            old = current.copy()
            size = min(cfg.batch_size, env.n_tasks)
            picks = rng.choice(env.n_tasks, size=size, replace=False)
            try:
                batch = [
                    _rollout_group(env, int(t), module, decomp, alloc, old, cfg.group_size, rng)
                    for t in picks
                ]
            except RouterError as exc:
                raise CotrainAborted(str(exc), history) from exc
            rewards.extend(r.reward for g in batch for r in g.rollouts)
            costs.extend(r.cost_microcents for g in batch for r in g.rollouts)
            for _ in range(cfg.inner_steps):
                current = update_policy(current, batch, cfg, ref)
            obj, _, kl = grpo_objective_and_gradient(batch, current, cfg, ref)
            objectives.append(obj)
            kls.append(kl)
            if module == "decomp":
                decomp = current
            else:
                alloc = current
        entry = {
            "round": rnd,
            "module": module,
            "mean_reward": float(np.mean(rewards)) if rewards else math.nan,
            "mean_cost_cents": float(np.mean(costs)) / 1e6 if costs else math.nan,
            "objective": float(np.mean(objectives)) if objectives else math.nan,
            "kl": float(np.mean(kls)) if kls else math.nan,
        }
        log.info("round %d (%s): reward %.3f cost %.4f", rnd, module, entry["mean_reward"], entry["mean_cost_cents"])
        history.append(entry)
    return decomp, alloc, history
