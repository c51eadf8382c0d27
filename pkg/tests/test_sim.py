import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from costroute.errors import InstanceTooLarge
from costroute.execution import run_chain
from costroute.pool import Usage, usage_cost_microcents
from costroute.sim import (
    Mode,
    SimModelBehavior,
    SimRoutingEnv,
    SimTask,
    Strategy,
    brute_force_optimal,
    gen_tasks,
    read_sim_tasks,
    sim_decompose,
    sim_token_probs,
    simulate_step,
)


def task(diffs, tokens=None, tid="t"):
    tokens = tokens or [(200, 100)] * len(diffs)
    return SimTask(tid, tuple(diffs), tuple(tokens))


def test_gen_tasks_is_deterministic():
    a, b = gen_tasks(5, 50), gen_tasks(5, 50)
    assert [t.to_json() for t in a] == [t.to_json() for t in b]
    assert [t.to_json() for t in gen_tasks(6, 50)] != [t.to_json() for t in a]


def test_gen_tasks_ranges():
    tasks = gen_tasks(1, 200, k_range=(2, 4))
    assert {t.k for t in tasks} == {2, 3, 4}
    assert all(0 <= d <= 1 for t in tasks for d in t.difficulties)
    assert all(100 <= a <= 400 and 50 <= b <= 300 for t in tasks for a, b in t.tokens)
    point = gen_tasks(1, 20, difficulty_dist=0.4)
    assert all(d == 0.4 for t in point for d in t.difficulties)
    with pytest.raises(ValueError):
        gen_tasks(1, 0)
    with pytest.raises(ValueError):
        gen_tasks(1, 5, k_range=(3, 2))


def test_task_json_round_trip(tmp_path):
    import json

    tasks = gen_tasks(2, 10)
    path = tmp_path / "t.jsonl"
    path.write_text("".join(json.dumps(t.to_json()) + "\n" for t in tasks))
    assert read_sim_tasks(path) == tasks


def test_task_validation():
    with pytest.raises(ValueError):
        task([1.2])
    with pytest.raises(ValueError):
        SimTask("t", (0.1, 0.2), ((1, 1),))


def test_deterministic_step_boundary():
    beh = SimModelBehavior()
    assert simulate_step(0.5, 4, beh, 0, 9).correct  # capability 0.5 exactly
    assert not simulate_step(0.51, 4, beh, 0, 9).correct
    assert simulate_step(0.0, 0, beh, 0, 9).correct
    assert simulate_step(1.0, 8, beh, 0, 9).correct
    res = simulate_step(0.2, 3, beh, 0, 9, (120, 40))
    assert res.usage == Usage(120, 40)


@given(st.floats(0, 1), st.integers(0, 8), st.integers(0, 2**32))
def test_steep_sigmoid_matches_deterministic(d, model, seed):
    cap = model / 8
    if abs(cap - d) < 1e-4:
        return
    steep = SimModelBehavior(Mode.SIGMOID, gamma=1e6)
    assert simulate_step(d, model, steep, seed, 9).correct == (cap >= d)


def test_sigmoid_rate_tracks_probability():
    beh = SimModelBehavior(Mode.SIGMOID, gamma=8.0)
    hits = np.mean([simulate_step(0.5, 4, beh, s, 9).correct for s in range(4000)])
    assert hits == pytest.approx(0.5, abs=0.03)
    hits = np.mean([simulate_step(0.25, 4, beh, s, 9).correct for s in range(4000)])
    assert hits == pytest.approx(1 / (1 + np.exp(-2.0)), abs=0.03)


def test_token_prob_distribution():
    easy = sim_token_probs(200, 0.0, seed=1)
    hard = sim_token_probs(200, 1.0, seed=1)
    assert min(easy) >= 0.9
    assert np.median(hard) <= 0.1
    assert all(0 <= p <= 1 for p in easy + hard)
    assert sim_token_probs(10, 0.5, 7) == sim_token_probs(10, 0.5, 7)


def test_strategies_shape():
    t = task([0.2, 0.5, 0.7])
    assert sim_decompose(t, Strategy.FAITHFUL).k == 3
    coarse = sim_decompose(t, Strategy.COARSE)
    assert coarse.k == 2
    assert coarse.subtasks[0].meta["difficulty"] == pytest.approx(0.6)
    assert coarse.subtasks[0].meta["tokens"] == (400, 200)
    fine = sim_decompose(t, Strategy.FINE)
    assert fine.k == 6
    assert fine.subtasks[0].meta["difficulty"] == pytest.approx(0.17)
    lossy = sim_decompose(t, Strategy.LOSSY)
    assert lossy.k == 2 and lossy.subtasks[-1].meta["lossy"]
    assert all(d.subtasks[-1].meta["is_last"] for d in
               (coarse, fine, lossy, sim_decompose(t)))


def test_brute_force_examples(pool9):
    best = brute_force_optimal(task([0.3, 0.6, 0.9]), pool9)
    assert best.assignments == [3, 5, 8] and best.acc == 1
    free = brute_force_optimal(task([0.1, 0.2]), pool9)
    assert free.assignments == [1, 2] and free.cost_microcents == 0
    lossy = brute_force_optimal(sim_decompose(task([0.1, 0.2]), Strategy.LOSSY), pool9)
    assert lossy.acc == 0 and lossy.assignments == []


def test_brute_force_unsolvable_and_bounds(pool9):
    weak = SimModelBehavior(capabilities=tuple([0.1] * 9))
    assert brute_force_optimal(task([0.5]), pool9, weak).acc == 0
    with pytest.raises(InstanceTooLarge):
        brute_force_optimal(task([0.1] * 4), pool9)
    with pytest.raises(ValueError):
        brute_force_optimal(task([0.1]), pool9, SimModelBehavior(Mode.SIGMOID))


def scan_oracle(t, pool):
    d = sim_decompose(t)
    best = None
    for ids in itertools.product(range(len(pool)), repeat=d.k):
        if any(j / (len(pool) - 1) < s.meta["difficulty"] for j, s in zip(ids, d.subtasks)):
            continue
        cost = sum(usage_cost_microcents(Usage(*s.meta["tokens"]), pool[j])
                   for j, s in zip(ids, d.subtasks))
        if best is None or (cost, list(ids)) < best:
            best = (cost, list(ids))
    return best


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_brute_force_matches_scan(pool9, seed):
    t = gen_tasks(seed, 1)[0]
    got = brute_force_optimal(t, pool9)
    cost, ids = scan_oracle(t, pool9)
    assert got.assignments == ids and got.cost_microcents == cost


def test_pinned_three_step_instance(pool9):
    t = task([0.42, 0.77, 0.05], [(300, 120), (250, 200), (100, 60)])
    best = brute_force_optimal(t, pool9)
    assert best.assignments == [4, 7, 1]  # model 0 has capability 0 < 0.05
    expected = (usage_cost_microcents(Usage(300, 120), pool9[4])
                + usage_cost_microcents(Usage(250, 200), pool9[7]))
    assert best.cost_microcents == expected


@pytest.mark.parametrize("mode", [Mode.DETERMINISTIC, Mode.SIGMOID])
def test_env_agrees_with_run_chain(pool9, sim9, mode):
    beh = SimModelBehavior(mode, 8.0)
    tasks = gen_tasks(21, 25)
    env = SimRoutingEnv(tasks, pool9, beh)
    from costroute.sim import SimExecutor

    executor = SimExecutor(pool9, beh)
    _, checker, _ = sim9
    rng = np.random.default_rng(0)
    for t_idx, t in enumerate(tasks):
        for c in range(env.n_candidates):
            d = env.candidate(t_idx, c)
            scheme = [int(x) for x in rng.integers(0, 9, size=d.k)]
            reward, cost = env.run(t_idx, c, scheme, seed=99)
            chain = run_chain(t.to_record(), d, scheme, pool9, executor, checker, seed=99)
            assert (reward, cost) == (chain.acc, chain.cost_microcents)


def test_env_features(pool9):
    env = SimRoutingEnv(gen_tasks(3, 5), pool9)
    assert env.n_tasks == 5 and env.n_candidates == 4
    x = env.task_features(0)
    assert x.shape == (7,)
    for c in range(4):
        assert env.subtask_features(0, c).shape[0] == env.candidate(0, c).k
