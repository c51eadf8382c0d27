"""Pure-Python/numpy versions of the hot kernels.

These define the reference semantics; ``_ckernels.pyx`` must agree with them
to floating-point rounding.
"""

from __future__ import annotations

import itertools

import numpy as np


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def grpo_terms(logits, actions, old_logp, ref_logp, adv, weight, eps, beta):
    """Weighted clipped-surrogate and KL terms over flattened rollout steps.

    Returns ``(objective, kl, dlogits)`` where ``objective`` is
    ``sum_n w_n * (min(r_n A_n, clip(r_n) A_n) - beta * KL_n)`` and
    ``dlogits`` is its gradient with respect to ``logits``.
    """
    logp = log_softmax(logits)
    p = np.exp(logp)
    n = logits.shape[0]
    rows = np.arange(n)
    ratio = np.exp(logp[rows, actions] - old_logp)
    clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps)
    unclipped_term = ratio * adv
    clipped_term = clipped * adv
    surr = np.minimum(unclipped_term, clipped_term)
    # gradient flows only where the unclipped branch attains the min
    active = unclipped_term <= clipped_term

    log_ratio_ref = logp - ref_logp
    kl = np.sum(p * log_ratio_ref, axis=1)

    onehot = np.zeros_like(logits)
    onehot[rows, actions] = 1.0
    g_surr = (active * ratio * adv)[:, None] * (onehot - p)
    g_kl = p * (log_ratio_ref - kl[:, None])

    objective = float(np.sum(weight * (surr - beta * kl)))
    kl_total = float(np.sum(weight * kl))
    dlogits = weight[:, None] * (g_surr - beta * g_kl)
    return objective, kl_total, dlogits


def min_cost_scheme(step_cost, feasible):
    """Enumerate every assignment and return the cheapest all-feasible one.

    ``step_cost[i, j]`` is the cost of subtask ``i`` on model ``j``; ties go to
    the lexicographically smallest id vector. Returns ``(ids, cost, found)``.
    """
    step_cost = np.asarray(step_cost, dtype=np.int64)
    feasible = np.asarray(feasible, dtype=bool)
    k, n = step_cost.shape
    best, best_cost = None, None
    for ids in itertools.product(range(n), repeat=k):
        if not all(feasible[i, j] for i, j in enumerate(ids)):
            continue
        cost = int(sum(int(step_cost[i, j]) for i, j in enumerate(ids)))
        if best_cost is None or cost < best_cost:
            best, best_cost = list(ids), cost
    if best is None:
        return [], 0, False
    return best, best_cost, True
