"""Acceptance criteria; each prints one PASS/FAIL line in the run summary."""

import itertools
import json
import time
from decimal import Decimal

import numpy as np
import pytest

from costroute import grpo
from costroute.allocation import estimate_all, grouped_search
from costroute.cli import main
from costroute.core import Decomposition, Subtask
from costroute.decomposition import select_best
from costroute.execution import PrmConfig, run_chain
from costroute.grpo import (
    FEATURE_DIM,
    GrpoConfig,
    PolicyParams,
    Rollout,
    TrajectoryGroup,
    cotrain,
    evaluate_policies,
    grpo_objective_and_gradient,
)
from costroute.orchestrator import FixedAllocator, SchemeAllocator, mean_abs_index_error, route_task
from costroute.sim import (
    Mode,
    SimExecutor,
    SimModelBehavior,
    SimRoutingEnv,
    brute_force_optimal,
    faithful_decomposer,
    gen_tasks,
    sim_components,
    sim_decompose,
)

pytestmark = pytest.mark.acceptance


@pytest.fixture
def verdict(acceptance_log):
    def record(n, name, ok, detail):
        acceptance_log.append(f"criterion {n} [{name}]: {'PASS' if ok else 'FAIL'} - {detail}")
        assert ok, detail

    return record


# 1 -------------------------------------------------------------------------


def scan_best(samples):
    any_correct = any(s.correctness == 1 for s in samples)
    pool = [(s.score, s.k, i) for i, s in enumerate(samples) if not any_correct or s.correctness == 1]
    return samples[min(pool)[2]]


def test_selection_matches_scan(verdict):
    rng = np.random.default_rng(2024)
    sets = []
    for _ in range(1000):
        samples = []
        for _ in range(int(rng.integers(1, 9))):
            k = int(rng.integers(1, 5))
            d = Decomposition("t", [Subtask(i, f"s{i}") for i in range(k)])
            d.correctness = int(rng.integers(0, 2))
            d.score = float(rng.integers(0, 8))  # coarse values force ties
            samples.append(d)
        sets.append(samples)
    t0 = time.perf_counter()
    chosen = [select_best(s) for s in sets]
    elapsed = time.perf_counter() - t0
    mismatches = sum(c is not scan_best(s) for c, s in zip(chosen, sets))
    verdict(1, "selection oracle", mismatches == 0 and elapsed < 1.0,
            f"{mismatches} mismatches over 1000 sets in {elapsed:.3f}s")


# 2 -------------------------------------------------------------------------


def micro(model, tokens):
    return int((model.price_in * tokens[0] + model.price_out * tokens[1]) * 1000)


def reachable_min_cost(task, pool, start, limit):
    best = None
    ranges = [range(max(0, s - limit + 1), min(pool.max_id, s + limit - 1) + 1) for s in start]
    for ids in itertools.product(*ranges):
        if all(m / pool.max_id >= d for m, d in zip(ids, task.difficulties)):
            cost = sum(micro(pool[m], tk) for m, tk in zip(ids, task.tokens))
            best = cost if best is None else min(best, cost)
    return best


def test_grouped_search_against_oracle(verdict, pool9, grouped9):
    ex, ck, probs = sim_components(pool9)
    tasks = gen_tasks(31337, 200, (1, 3))
    t0 = time.perf_counter()
    traces = []
    for task in tasks:
        record, d = task.to_record(), sim_decompose(task)
        buckets = [e.bucket for e in estimate_all(record, d, probs)]
        traces.append(grouped_search(record, d, buckets, grouped9, pool9, ex, ck, 20))
    elapsed = time.perf_counter() - t0
    missed, over_top, found, matched = 0, 0, 0, 0
    for task, trace in zip(tasks, traces):
        oracle = brute_force_optimal(task, pool9)
        top_cost = sum(micro(pool9[pool9.max_id], tk) for tk in task.tokens)
        if oracle.acc == 1 and trace.result.acc != 1:
            missed += 1
        if trace.result.acc == 1:
            found += 1
            over_top += trace.result.cost_microcents > top_cost
            start = trace.schemes[0].assignments
            matched += trace.result.cost_microcents == reachable_min_cost(task, pool9, start, 20)
    rate = matched / found if found else 0.0
    ok = missed == 0 and over_top == 0 and rate >= 0.9 and elapsed < 10
    verdict(2, "grouped search vs oracle", ok,
            f"missed={missed} above-top={over_top} reachable-optimal={rate:.3f} in {elapsed:.2f}s")


# 3 -------------------------------------------------------------------------


def random_instance(rng):
    params = PolicyParams(rng.normal(size=(9, FEATURE_DIM)))
    old = PolicyParams(params.weights + 0.3 * rng.normal(size=params.weights.shape))
    ref = PolicyParams(params.weights + 0.5 * rng.normal(size=params.weights.shape))
    rollouts = []
    for _ in range(8):
        steps = int(rng.integers(1, 4))
        x = rng.uniform(0, 1, size=(steps, FEATURE_DIM))
        acts = [int(rng.choice(9, p=row)) for row in old.probs(x)]
        lp = old.log_probs(x)[np.arange(steps), acts]
        rollouts.append(Rollout(acts, x, lp, int(rng.integers(0, 2))))
    return [TrajectoryGroup("g", rollouts)], params, ref


def test_gradient_check(verdict):
    rng = np.random.default_rng(77)
    cfg = GrpoConfig(kl_beta=0.05)
    h = 1e-6
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(50):
        batch, params, ref = random_instance(rng)
        _, grad, _ = grpo_objective_and_gradient(batch, params, cfg, ref)
        fd = np.zeros_like(grad)
        for idx in np.ndindex(grad.shape):
            w = params.weights.copy()
            w[idx] += h
            up = grpo_objective_and_gradient(batch, PolicyParams(w), cfg, ref)[0]
            w[idx] -= 2 * h
            down = grpo_objective_and_gradient(batch, PolicyParams(w), cfg, ref)[0]
            fd[idx] = (up - down) / (2 * h)
        worst = max(worst, np.linalg.norm(grad - fd) / max(np.linalg.norm(fd), 1e-12))
    elapsed = time.perf_counter() - t0
    verdict(3, "gradient check", worst < 1e-5 and elapsed < 5,
            f"max relative error {worst:.2e} over 50 instances in {elapsed:.2f}s")


# 4 -------------------------------------------------------------------------


def test_cotraining_learns(verdict, pool9, monkeypatch):
    nonfinite = []
    real = grpo.group_advantages

    def watched(rewards):
        adv = real(rewards)
        if not np.all(np.isfinite(adv)):
            nonfinite.append(list(rewards))
        return adv

    monkeypatch.setattr(grpo, "group_advantages", watched)
    t0 = time.perf_counter()
    env = SimRoutingEnv(gen_tasks(500, 500), pool9, SimModelBehavior(Mode.SIGMOID, 8.0))
    d0, a0 = PolicyParams.uniform(4, "decomposer"), PolicyParams.uniform(9)
    before, _ = evaluate_policies(env, d0, a0, seed=11)
    d, a, hist = cotrain(d0, a0, env, GrpoConfig(), 6, seed=5)
    after, _ = evaluate_policies(env, d, a, seed=11)
    elapsed = time.perf_counter() - t0
    finite = not nonfinite and all(np.isfinite(h["objective"]) for h in hist)
    gain = after - before
    verdict(4, "co-training gain", gain >= 0.15 and finite and elapsed < 60,
            f"mean reward {before:.3f} -> {after:.3f} (+{gain:.3f}), finite={finite}, {elapsed:.1f}s")


# 5 -------------------------------------------------------------------------


def cli(*argv):
    code = main([str(a) for a in argv])
    assert code == 0, argv


def test_cost_accuracy_tradeoff(verdict, tmp_path, capsys):
    t0 = time.perf_counter()
    cli("sim-gen", "--n", 1000, "--seed", 42, "--out", tmp_path / "train.jsonl")
    cli("sim-gen", "--n", 1000, "--seed", 7, "--out", tmp_path / "test.jsonl")
    cli("alloc-dataset", "--tasks", tmp_path / "train.jsonl", "--seed", 1, "--out", tmp_path / "alloc.jsonl")
    cli("train", "--tasks", tmp_path / "train.jsonl", "--alloc-data", tmp_path / "alloc.jsonl",
        "--seed", 3, "--out-dir", tmp_path / "ckpt")
    cli("eval", "--tasks", tmp_path / "test.jsonl", "--decomp-ckpt", tmp_path / "ckpt" / "decomp.ckpt",
        "--alloc-ckpt", tmp_path / "ckpt" / "alloc.ckpt", "--out", tmp_path / "report.json")
    elapsed = time.perf_counter() - t0
    capsys.readouterr()
    report = json.loads((tmp_path / "report.json").read_text())
    ratio, delta = report["cost_ratio"], report["acc_delta_pp"]
    ok = ratio <= 0.40 and abs(delta) <= 2.0 and elapsed < 120
    verdict(5, "cost-accuracy tradeoff", ok,
            f"cost ratio {ratio:.3f}, accuracy {report['metrics']['acc']:.3f} vs "
            f"{report['baseline']['acc']:.3f} ({delta:+.2f} pp), {elapsed:.1f}s")


# 6 -------------------------------------------------------------------------


def test_metric_arithmetic(verdict, pool9):
    mae_ok = (mean_abs_index_error([2, 4], [3, 4]) == 0.5
              and mean_abs_index_error([0, 8], [8, 0]) == 8.0)
    ex, ck, _ = sim_components(pool9)
    rng = np.random.default_rng(6)
    prm = PrmConfig(True, strong_model_id=8, threshold_model_id=6)
    bad = 0
    tasks = gen_tasks(66, 300)
    for task in tasks:
        d = sim_decompose(task)
        ids = [int(x) for x in rng.integers(0, 9, size=d.k)]
        trace = route_task(task.to_record(), faithful_decomposer, SchemeAllocator({task.task_id: ids}),
                           ex, ck, pool9, prm=prm, reviewer=ex, seed=int(rng.integers(1 << 30)))
        exact = Decimal(0)
        for s in trace.steps:
            m = pool9[s.model_id]
            exact += (m.price_in * s.usage.tokens_in + m.price_out * s.usage.tokens_out) / 1000
            strong = pool9[8]
            exact += (strong.price_in * s.prm_usage.tokens_in + strong.price_out * s.prm_usage.tokens_out) / 1000
        ledger = sum(s.cost_microcents + s.prm_cost_microcents for s in trace.steps)
        bad += ledger != trace.cost_microcents or Decimal(trace.cost_microcents) != exact * 10**6
    verdict(6, "metric arithmetic", mae_ok and bad == 0,
            f"MAE fixtures {'ok' if mae_ok else 'wrong'}, {bad} ledger mismatches over {len(tasks)} traces")


# 7 -------------------------------------------------------------------------


def test_prm_never_hurts(verdict, pool9):
    ex, ck, _ = sim_components(pool9)
    rng = np.random.default_rng(7)
    worse, better = 0, 0
    tasks = gen_tasks(77, 500)
    for task in tasks:
        d = sim_decompose(task)
        ids = [int(x) for x in rng.integers(0, 9, size=d.k)]
        threshold = int(rng.integers(0, 9))
        seed = int(rng.integers(1 << 30))
        record = task.to_record()
        off = run_chain(record, d, ids, pool9, ex, ck, seed=seed)
        on = run_chain(record, d, ids, pool9, ex, ck, PrmConfig(True, 8, threshold), ex, seed=seed)
        worse += on.acc < off.acc
        better += on.acc > off.acc
    verdict(7, "PRM monotonicity", worse == 0,
            f"{worse} regressions, {better} fixes over {len(tasks)} paired runs")


# 8 -------------------------------------------------------------------------


def pipeline(root):
    root.mkdir()
    cli("sim-gen", "--n", 120, "--seed", 8, "--out", root / "tasks.jsonl")
    cli("decomp-dataset", "--tasks", root / "tasks.jsonl", "--seed", 2, "--out", root / "decomp.jsonl")
    cli("alloc-dataset", "--tasks", root / "tasks.jsonl", "--seed", 2, "--workers", 4, "--out", root / "alloc.jsonl")
    cli("search", "--tasks", root / "tasks.jsonl", "--seed", 2, "--out", root / "search.jsonl")
    cli("train", "--tasks", root / "tasks.jsonl", "--alloc-data", root / "alloc.jsonl", "--rounds", 2,
        "--iterations", 5, "--seed", 2, "--out-dir", root / "ckpt")
    ckpt = ["--decomp-ckpt", root / "ckpt" / "decomp.ckpt", "--alloc-ckpt", root / "ckpt" / "alloc.ckpt"]
    cli("route", "--tasks", root / "tasks.jsonl", *ckpt, "--prm", "--seed", 2, "--workers", 4,
        "--out", root / "traces.jsonl")
    cli("eval", "--tasks", root / "tasks.jsonl", *ckpt, "--labels", root / "alloc.jsonl", "--seed", 2,
        "--out", root / "report.json", "--traces-out", root / "eval_traces.jsonl")
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_pipeline_determinism(verdict, tmp_path, capsys):
    first = pipeline(tmp_path / "a")
    second = pipeline(tmp_path / "b")
    capsys.readouterr()
    differing = [str(k) for k in first if first[k] != second.get(k)]
    ok = not differing and set(first) == set(second)
    verdict(8, "determinism", ok,
            f"{len(first)} files compared, differing: {differing or 'none'}")
