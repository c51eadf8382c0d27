import json

import pytest

from costroute.allocation import AllocationScheme
from costroute.core import Decomposition, Subtask, TaskRecord
from costroute.errors import EmptyTraces, ExecutorFailure, LabelMismatch, PoolConfigError
from costroute.execution import PrmConfig, run_chain
from costroute.orchestrator import (
    FixedAllocator,
    MetricsReport,
    RoutingTrace,
    SchemeAllocator,
    SearchAllocator,
    compute_metrics,
    mean_abs_index_error,
    route_many,
    route_task,
)
from costroute.pool import MICROCENTS_PER_CENT, Usage, usage_cost_microcents
from costroute.sim import (
    Mode,
    SimExecutor,
    SimModelBehavior,
    SimTask,
    faithful_decomposer,
    gen_tasks,
)


def record(diffs, tid="t", tokens=(200, 100)):
    return SimTask(tid, tuple(diffs), tuple([tokens] * len(diffs))).to_record()


@pytest.fixture
def route(pool9, sim9):
    executor, checker, _ = sim9

    def go(task, allocator, prm=None, reviewer=None, seed=0):
        return route_task(task, faithful_decomposer, allocator, executor, checker, pool9,
                          prm=prm, reviewer=reviewer or executor, seed=seed)

    return go


def test_all_top_model_is_correct_and_costs_step_sum(route, pool9):
    t = record([0.9, 0.4, 0.99])
    trace = route(t, FixedAllocator(8))
    assert trace.acc == 1
    assert trace.final_answer == t.ground_truth
    per_step = usage_cost_microcents(Usage(200, 100), pool9[8])
    assert trace.cost_microcents == 3 * per_step
    assert trace.cost_microcents == sum(s.cost_microcents for s in trace.steps)
    assert trace.prm_cost_microcents == 0


def test_single_subtask(route):
    trace = route(record([0.3]), FixedAllocator(3))
    assert len(trace.steps) == 1 and trace.acc == 1 and trace.cost_microcents == 0


def test_weak_step_breaks_chain(route):
    trace = route(record([0.2, 0.9]), SchemeAllocator({"t": [2, 4]}))
    assert trace.acc == 0
    assert trace.steps[1].raw_result.endswith(":wrong")


def test_invalid_scheme_rejected(route):
    with pytest.raises(ValueError):
        route(record([0.2, 0.9]), SchemeAllocator({"t": [2]}))
    with pytest.raises(ValueError):
        route(record([0.2]), SchemeAllocator({"t": [9]}))


def test_prm_strong_equals_assigned_costs_nothing(route):
    prm = PrmConfig(True, strong_model_id=8, threshold_model_id=8)
    trace = route(record([0.5, 0.95]), FixedAllocator(8), prm)
    assert not any(s.prm_applied for s in trace.steps)
    assert trace.prm_cost_microcents == 0


def test_prm_corrects_wrong_step(route, pool9):
    prm = PrmConfig(True, strong_model_id=8, threshold_model_id=4)
    t = record([0.6])
    plain = route(t, FixedAllocator(1))
    fixed = route(t, FixedAllocator(1), prm)
    assert plain.acc == 0 and fixed.acc == 1
    step = fixed.steps[0]
    assert step.prm_applied and step.raw_result.endswith(":wrong")
    assert step.prm_cost_microcents == usage_cost_microcents(Usage(300, 100), pool9[8])
    assert fixed.cost_microcents == step.cost_microcents + step.prm_cost_microcents


def test_prm_threshold_at_minimum_never_fires(route):
    prm = PrmConfig(True, strong_model_id=8, threshold_model_id=0)
    for t in gen_tasks(4, 20):
        trace = route(t.to_record(), FixedAllocator(0), prm)
        assert not any(s.prm_applied for s in trace.steps)


def test_prm_threshold_at_maximum_gives_full_accuracy(route):
    prm = PrmConfig(True, strong_model_id=8, threshold_model_id=8)
    for t in gen_tasks(5, 30):
        assert route(t.to_record(), FixedAllocator(0), prm).acc == 1


def test_prm_config_validation(pool9):
    with pytest.raises(PoolConfigError):
        PrmConfig(True, strong_model_id=2, threshold_model_id=5).validate(pool9)
    with pytest.raises(PoolConfigError):
        PrmConfig(True, strong_model_id=8).validate(pool9)


def test_prm_reviewer_failure_passes_raw_through(pool9, sim9):
    executor, checker, _ = sim9

    class Broken:
        def review(self, *a):
            raise ExecutorFailure("down")

    prm = PrmConfig(True, 8, 8)
    t = record([0.6])
    res = run_chain(t, faithful_decomposer(t), [1], pool9, executor, checker, prm, Broken())
    assert res.steps[0].prm_warning and res.acc == 0


def test_executor_failure_marks_step(pool9, sim9):
    _, checker, _ = sim9

    class Flaky(SimExecutor):
        def run_step(self, task, subtask, model, history, seed):
            if subtask.index == 0:
                raise ExecutorFailure("boom")
            return super().run_step(task, subtask, model, history, seed)

    t = record([0.1, 0.1])
    trace = route_task(t, faithful_decomposer, FixedAllocator(8), Flaky(pool9), checker, pool9)
    assert trace.acc == 0 and trace.steps[0].failed and not trace.steps[1].failed


def test_search_allocator_routes_cheaply(route, pool9, grouped9, sim9):
    executor, checker, probs = sim9
    alloc = SearchAllocator(grouped9, pool9, executor, checker, probs)
    t = record([0.3, 0.6])
    trace = route(t, alloc)
    assert trace.acc == 1
    assert trace.cost_microcents < route(t, FixedAllocator(8)).cost_microcents


def test_traces_are_deterministic(route, pool9, sim9):
    executor, checker, _ = sim9
    beh = SimModelBehavior(Mode.SIGMOID, 8.0)
    tasks = [t.to_record() for t in gen_tasks(8, 40)]
    kw = dict(decomposer=faithful_decomposer, allocator=FixedAllocator(5),
              executor=SimExecutor(pool9, beh), checker=checker, pool=pool9, seed=3)
    a = [json.dumps(t.to_json()) for t in route_many(tasks, **kw)]
    b = [json.dumps(t.to_json()) for t in route_many(tasks, workers=4, **kw)]
    assert a == b


def fake_trace(acc, cost_cents, ids=(0,), tid="t", score=None):
    d = Decomposition(tid, [Subtask(i, f"s{i}") for i in range(len(ids))], score=score)
    micro = int(cost_cents * MICROCENTS_PER_CENT)
    return RoutingTrace(tid, d, AllocationScheme(tid, list(ids), acc, micro), [], "", acc, micro, 0, 0.0)


def test_mae_examples():
    assert mean_abs_index_error([3, 5, 8], [3, 5, 8]) == 0
    assert mean_abs_index_error([0, 8], [8, 0]) == 8
    assert mean_abs_index_error([2, 4, 6], [3, 3, 3]) == pytest.approx(5 / 3)
    with pytest.raises(LabelMismatch):
        mean_abs_index_error([1, 2], [1])


def test_metrics_example():
    traces = [fake_trace(a, c, tid=f"t{i}") for i, (a, c) in enumerate(zip([1, 0, 1, 1], [0, 2, 4, 2]))]
    m = compute_metrics(traces)
    assert m.acc == 0.75 and m.c_api_cents == 2.0 and m.n_tasks == 4
    assert m.mae is None and m.c_d is None


def test_metrics_labels_and_baseline():
    traces = [fake_trace(1, 1, (2, 4), "a", 3.0), fake_trace(0, 1, (8,), "b", 5.0)]
    m = compute_metrics(traces, {"a": [3, 4]}, baseline_traces=[fake_trace(1, 5), fake_trace(0, 5)])
    assert m.mae == 0.5 and m.n_labeled_subtasks == 2
    assert m.c_d == 0.5 and m.mean_score == 4.0
    with pytest.raises(LabelMismatch):
        compute_metrics(traces, {"a": [1]})
    with pytest.raises(EmptyTraces):
        compute_metrics([])


def test_metrics_merge_matches_pooled():
    xs = [fake_trace(a, c, tid=f"x{i}") for i, (a, c) in enumerate([(1, 1), (0, 3)])]
    ys = [fake_trace(a, c, tid=f"y{i}") for i, (a, c) in enumerate([(1, 2), (1, 4), (0, 0)])]
    merged = compute_metrics(xs).merge(compute_metrics(ys))
    pooled = compute_metrics(xs + ys)
    assert merged.acc == pytest.approx(pooled.acc)
    assert merged.c_api_cents == pytest.approx(pooled.c_api_cents)
    assert merged.n_tasks == 5


def test_metrics_report_validation():
    with pytest.raises(ValueError):
        MetricsReport(1.5, 0.0, 1)
    with pytest.raises(ValueError):
        MetricsReport(0.5, -1.0, 1)
