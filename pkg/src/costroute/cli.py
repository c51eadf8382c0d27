"""Command-line entry point: dataset building, search, training, routing and evaluation.

Every subcommand prints one JSON summary line on stdout. Exit codes: 0 on
success, 1 on a domain error, 2 on a usage error or a missing input path.
Settings resolve as command-line flag, then config file, then built-in default.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__
from .allocation import (
    DEFAULT_ALPHA,
    DEFAULT_TAU1,
    DEFAULT_TAU2,
    MAX_SEARCH_LIMIT,
    AllocDatasetEntry,
    build_alloc_dataset,
    estimate_all,
    grouped_search,
)
from .core import Decomposition, ExactMatchChecker, Subtask, TaskRecord
from .decomposition import LexicalJudge, ScoreWeights, build_decomp_dataset, evaluate_coherence, score_decomposition
from .errors import RouterError
from .execution import PrmConfig, derive_seed
from .grpo import FEATURE_DIM, REF_MODES, GrpoConfig, PolicyParams, cotrain, dump_policy, featurize, fit_supervised
from .orchestrator import (
    FixedAllocator,
    PolicyAllocator,
    PolicyDecomposer,
    SearchAllocator,
    compute_metrics,
    route_many,
)
from .pool import default_pool, load_pool, partition_groups

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("costroute")

UNSPECIFIED = "defaults, not paper-specified"


class UsageError(Exception):
    pass


# -- io helpers ---------------------------------------------------------------


def write_atomic(path: str | Path, text: str) -> None:
    """Write via a temporary file in the target directory, then rename over it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def jsonl(docs) -> str:
    return "".join(json.dumps(d, ensure_ascii=False) + "\n" for d in docs)


def read_jsonl(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _require(path, what: str) -> Path:
    if path is None:
        raise UsageError(f"{what} is required")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} {p} does not exist")
    return p


# -- shared wiring ------------------------------------------------------------


class Context:
    """Pool, tasks and pipeline components resolved from the parsed arguments."""

    def __init__(self, args):
        self.args = args
        if args.pool is not None:
            self.pool = load_pool(_require(args.pool, "pool config"))
        else:
            self.pool = default_pool()
        self.grouped = partition_groups(self.pool)
        self.sim_tasks = None
        self.tasks: list[TaskRecord] = []
        tasks_path = getattr(args, "tasks", None)
        if tasks_path is not None:
            self._load_tasks(_require(tasks_path, "task file"))
        self.completer = None
        if self.sim_tasks is None and self.tasks:
            self.completer = self._completer()
        self._wire()

    def _load_tasks(self, path):
        from .sim import SimTask

        docs = read_jsonl(path)
        if docs and all("difficulties" in d for d in docs):
            self.sim_tasks = [SimTask.from_json(d) for d in docs]
            self.tasks = [t.to_record() for t in self.sim_tasks]
        else:
            self.tasks = [
                TaskRecord(str(d["task_id"]), d["text"], d.get("ground_truth"), d.get("benchmark_tag", ""))
                for d in docs
            ]

    def _completer(self):
        from .backend import Cassette, HttpCompleter, RecordingCompleter, ReplayCompleter

        a = self.args
        if a.replay:
            return ReplayCompleter(Cassette(_require(a.replay, "cassette")))
        live = HttpCompleter(a.endpoint)
        if a.record:
            return RecordingCompleter(live, Cassette(a.record))
        return live

    def _wire(self):
        a = self.args
        self.checker = ExactMatchChecker()
        if self.completer is None:
            from .sim import (
                Mode,
                SimDecompositionGenerator,
                SimExecutor,
                SimModelBehavior,
                SimTokenProbSource,
            )

            self.behavior = SimModelBehavior(Mode(a.sim_mode), a.gamma)
            self.executor = SimExecutor(self.pool, self.behavior)
            self.reviewer = self.executor
            self.prob_source = SimTokenProbSource()
            self.generator = SimDecompositionGenerator()
            self.judge = LexicalJudge()
        else:
            from .backend import (
                LlmDecompositionGenerator,
                LlmExecutor,
                LlmJudge,
                LlmReviewer,
                LlmTokenProbSource,
            )

            eval_model = self.pool[self.pool.eval_model_id]
            self.executor = LlmExecutor(self.completer)
            self.reviewer = LlmReviewer(self.completer)
            self.prob_source = LlmTokenProbSource(self.completer, eval_model)
            self.generator = LlmDecompositionGenerator(self.completer, eval_model)
            self.judge = LlmJudge(self.completer, eval_model) if a.judge == "llm" else LexicalJudge()

    def base_decomposer(self):
        if self.sim_tasks is not None:
            from .sim import faithful_decomposer

            return faithful_decomposer
        gen, seed = self.generator, self.args.seed

        def first_sample(task):
            cands = gen.generate(task, 1, derive_seed(seed, task.task_id, "gen"))
            if not cands:
                raise RouterError(f"{task.task_id}: generator returned no decomposition")
            return cands[0]

        return first_sample

    def task_features(self, task: TaskRecord) -> np.ndarray:
        a = self.args
        if self.sim_tasks is not None:
            from .sim import sim_task_features, sim_task_of

            return sim_task_features(sim_task_of(task), self.prob_source, a.alpha, a.tau1, a.tau2)
        # whole task probed as one subtask
        est = estimate_all(task, Decomposition(task.task_id, [Subtask(0, task.text)]), self.prob_source,
                           a.alpha, a.tau1, a.tau2)
        return featurize([est[0].quantile_value], [est[0].bucket], [task.text])[0]

    def decomposer(self):
        path = getattr(self.args, "decomp_ckpt", None)
        if path is None:
            return self.base_decomposer()
        policy = PolicyParams.load(_require(path, "decomposer checkpoint"))
        return PolicyDecomposer(self.generator, policy, self.task_features, self.args.seed)

    def allocator(self):
        a = self.args
        if getattr(a, "alloc_ckpt", None) is not None:
            policy = PolicyParams.load(_require(a.alloc_ckpt, "allocator checkpoint"))
            if policy.n_actions != len(self.pool):
                raise UsageError(f"allocator checkpoint has {policy.n_actions} actions for a pool of {len(self.pool)}")
            return PolicyAllocator(policy, self.prob_source, a.alpha, a.tau1, a.tau2, a.decode, a.confidence)
        if getattr(a, "fixed_model", None) is not None:
            return FixedAllocator(self.pool.resolve(_model_ref(a.fixed_model)).id)
        return SearchAllocator(self.grouped, self.pool, self.executor, self.checker, self.prob_source,
                               a.limit, a.alpha, a.tau1, a.tau2, a.seed)

    def prm(self) -> PrmConfig:
        a = self.args
        if not a.prm:
            return PrmConfig()
        strong = self.pool.resolve(_model_ref(a.strong_model)).id if a.strong_model is not None else self.pool.max_id
        thresh = (self.pool.resolve(_model_ref(a.threshold_model)).id if a.threshold_model is not None
                  else self.grouped.llm_group[0].id)
        return PrmConfig(True, strong, thresh)

    def route_kwargs(self):
        return dict(executor=self.executor, checker=self.checker, pool=self.pool, prm=self.prm(),
                    reviewer=self.reviewer, seed=self.args.seed)


def _model_ref(value):
    return int(value) if str(value).isdigit() else value


# -- subcommands ----------------------------------------------------------------


def cmd_sim_gen(args) -> dict:
    from .sim import gen_tasks

    if args.pool is not None:
        load_pool(_require(args.pool, "pool config"))  # tasks do not depend on it, but fail early
    try:
        dist = float(args.difficulty)
    except ValueError:
        dist = args.difficulty
    tasks = gen_tasks(args.seed, args.n, (args.k_min, args.k_max), dist)
    write_atomic(args.out, jsonl(t.to_json() for t in tasks))
    return {"n_tasks": len(tasks), "out": str(args.out)}


def cmd_decomp_dataset(args) -> dict:
    ctx = Context(args)
    w = ScoreWeights(args.w_c, args.w_p, args.w_d)
    entries = build_decomp_dataset(ctx.tasks, ctx.generator, args.m, w, ctx.executor, ctx.checker,
                                   ctx.judge, ctx.pool, args.seed, args.workers)
    write_atomic(args.out, jsonl(e.to_json() for e in entries))
    return {
        "n_tasks": len(ctx.tasks),
        "n_entries": len(entries),
        "n_correct": sum(e.chosen.correctness for e in entries),
        "out": str(args.out),
    }


def cmd_alloc_dataset(args) -> dict:
    ctx = Context(args)
    entries = build_alloc_dataset(ctx.tasks, ctx.decomposer(), ctx.prob_source, ctx.grouped, ctx.pool,
                                  ctx.executor, ctx.checker, args.limit, args.alpha, args.tau1, args.tau2,
                                  args.seed, args.workers)
    write_atomic(args.out, jsonl(e.to_json() for e in entries))
    return {"n_tasks": len(ctx.tasks), "n_entries": len(entries), "out": str(args.out)}


def cmd_search(args) -> dict:
    ctx = Context(args)
    decompose = ctx.decomposer()
    docs, found = [], 0
    for task in ctx.tasks:
        d = decompose(task)
        est = estimate_all(task, d, ctx.prob_source, args.alpha, args.tau1, args.tau2, args.seed)
        trace = grouped_search(task, d, [e.bucket for e in est], ctx.grouped, ctx.pool, ctx.executor,
                               ctx.checker, args.limit, derive_seed(args.seed, task.task_id))
        doc = trace.to_json()
        doc["buckets"] = [e.bucket.value for e in est]
        docs.append(doc)
        found += int(bool(trace.result.acc))
    write_atomic(args.out, jsonl(docs))
    return {"n_tasks": len(ctx.tasks), "n_found": found, "out": str(args.out)}


def _alloc_training_data(path):
    entries = [AllocDatasetEntry.from_json(d) for d in read_jsonl(path)]
    if not entries:
        return np.zeros((0, FEATURE_DIM)), np.zeros(0, dtype=np.int64)
    x = np.vstack([
        featurize([e.quantile_value for e in ent.estimates], [e.bucket for e in ent.estimates], ent.subtasks)
        for ent in entries
    ])
    y = np.concatenate([np.asarray(ent.labels, dtype=np.int64) for ent in entries])
    return x, y


def cmd_train(args) -> dict:
    from .sim import STRATEGIES, SimRoutingEnv

    ctx = Context(args)
    if ctx.sim_tasks is None:
        raise UsageError("train needs simulated tasks (--tasks from sim-gen)")
    alloc = PolicyParams.uniform(len(ctx.pool), "allocator")
    n_sft = 0
    if args.alloc_data is not None:
        x, y = _alloc_training_data(_require(args.alloc_data, "allocation dataset"))
        if len(y) and y.max() >= len(ctx.pool):
            raise UsageError("allocation dataset labels exceed the pool size")
        alloc = fit_supervised(alloc, x, y, args.sft_l2, args.sft_max_iter)
        n_sft = int(len(y))
    if args.decomp_init == "uniform":
        decomp = PolicyParams.uniform(len(STRATEGIES), "decomposer")
    else:
        decomp = PolicyParams.prior(len(STRATEGIES), 0, args.decomp_prior_mass, "decomposer")
    env = SimRoutingEnv(ctx.sim_tasks, ctx.pool, ctx.behavior, args.alpha, args.tau1, args.tau2)
    cfg = GrpoConfig(args.group_size, args.clip_eps, args.kl_beta, args.lr, args.iterations,
                     args.batch_size, args.inner_steps)
    decomp, alloc, history = cotrain(decomp, alloc, env, cfg, args.rounds, args.seed, args.ref_policy)
    out = Path(args.out_dir)
    write_atomic(out / "decomp.ckpt", dump_policy(decomp))
    write_atomic(out / "alloc.ckpt", dump_policy(alloc))
    write_atomic(out / "history.jsonl", jsonl(history))
    last = history[-1]
    return {
        "rounds": len(history),
        "sft_subtasks": n_sft,
        "final_mean_reward": last["mean_reward"],
        "out_dir": str(out),
    }


def cmd_route(args) -> dict:
    ctx = Context(args)
    traces = route_many(ctx.tasks, args.workers, decomposer=ctx.decomposer(), allocator=ctx.allocator(),
                        **ctx.route_kwargs())
    write_atomic(args.out, jsonl(t.to_json() for t in traces))
    n = len(traces)
    return {
        "n_tasks": n,
        "acc": sum(t.acc for t in traces) / n if n else None,
        "c_api_cents": sum(t.cost_cents for t in traces) / n if n else None,
        "out": str(args.out),
    }


def _score_traces(traces, eval_traces, judge, weights):
    """Fill coherence, eval-model tokens, correctness and score on each trace's decomposition."""
    for t, e in zip(traces, eval_traces):
        d = t.decomposition
        evaluate_coherence(d, judge, "")
        for sub, step in zip(d.subtasks, e.steps):
            sub.token_count_eval = step.usage.total
        d.correctness = e.acc
        score_decomposition(d, weights)


def cmd_eval(args) -> dict:
    ctx = Context(args)
    if not ctx.tasks:
        raise UsageError("eval needs a non-empty task file")
    decompose = ctx.decomposer()
    kw = ctx.route_kwargs()
    traces = route_many(ctx.tasks, args.workers, decomposer=decompose, allocator=ctx.allocator(), **kw)

    # single-model comparators run on the same decompositions
    chosen = {t.task_id: t.decomposition for t in traces}

    def same_decomposition(task):
        return chosen[task.task_id]

    plain = dict(kw, prm=PrmConfig())
    top = ctx.pool.max_id
    top_traces = route_many(ctx.tasks, args.workers, decomposer=same_decomposition,
                            allocator=FixedAllocator(top), **plain)
    eval_traces = route_many(ctx.tasks, args.workers, decomposer=same_decomposition,
                             allocator=FixedAllocator(ctx.pool.eval_model_id), **plain)
    _score_traces(traces, eval_traces, ctx.judge, ScoreWeights(args.w_c, args.w_p, args.w_d))

    labels = None
    if args.labels is not None:
        labels = {}
        for doc in read_jsonl(_require(args.labels, "label file")):
            labels[doc["task_id"]] = [int(v) for v in doc["labels"]]
        # labels only apply where the routed decomposition has the labelled length
        labels = {t.task_id: labels[t.task_id] for t in traces
                  if t.task_id in labels and len(labels[t.task_id]) == t.decomposition.k}
    report = compute_metrics(traces, labels, eval_traces)
    base = compute_metrics(top_traces)
    ratio = report.c_api_cents / base.c_api_cents if base.c_api_cents > 0 else None
    doc = {
        "metrics": report.to_json(),
        "baseline": {
            "model_id": top,
            "model": ctx.pool[top].name,
            "acc": base.acc,
            "c_api_cents": base.c_api_cents,
        },
        "cost_ratio": ratio,
        "acc_delta_pp": 100.0 * (report.acc - base.acc),
    }
    write_atomic(args.out, json.dumps(doc, indent=2) + "\n")
    if args.traces_out is not None:
        write_atomic(args.traces_out, jsonl(t.to_json() for t in traces))
    return {
        "n_tasks": report.n_tasks,
        "acc": report.acc,
        "c_api_cents": report.c_api_cents,
        "baseline_acc": base.acc,
        "baseline_c_api_cents": base.c_api_cents,
        "cost_ratio": ratio,
        "out": str(args.out),
    }


COMMANDS = {
    "sim-gen": cmd_sim_gen,
    "decomp-dataset": cmd_decomp_dataset,
    "alloc-dataset": cmd_alloc_dataset,
    "search": cmd_search,
    "train": cmd_train,
    "route": cmd_route,
    "eval": cmd_eval,
}


# -- argument parsing -----------------------------------------------------------


def _limit(text: str) -> int:
    value = int(text)
    if not 1 <= value <= MAX_SEARCH_LIMIT:
        raise argparse.ArgumentTypeError(f"limit must lie in [1, {MAX_SEARCH_LIMIT}]")
    return value


def _unit(text: str) -> float:
    value = float(text)
    if not 0.0 < value < 1.0:
        raise argparse.ArgumentTypeError("value must lie strictly between 0 and 1")
    return value


def _add_common(p):
    p.add_argument("--config", help="TOML run config; flags override it")
    p.add_argument("--pool", help="pool config (TOML or JSON); the bundled nine-model pool when omitted")
    p.add_argument("--seed", type=int, default=0, help="master seed (default %(default)s)")
    p.add_argument("--workers", type=int, default=1, help="parallel tasks (default %(default)s)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _add_tasks(p):
    p.add_argument("--tasks", "--sim-tasks", dest="tasks", required=False,
                   help="task JSONL: simulated tasks from sim-gen, or {task_id, text, ground_truth} records")
    p.add_argument("--sim-mode", choices=["deterministic", "sigmoid"], default="deterministic",
                   help="simulated model behaviour (default %(default)s)")
    p.add_argument("--gamma", type=float, default=8.0,
                   help=f"sigmoid sharpness of the simulator (default %(default)s; {UNSPECIFIED})")
    p.add_argument("--endpoint", help="override every model's endpoint (non-simulated tasks)")
    p.add_argument("--record", help="append live exchanges to this cassette")
    p.add_argument("--replay", help="answer only from this cassette; no network")
    p.add_argument("--judge", choices=["lexical", "llm"], default="lexical",
                   help="coherence judge for non-simulated tasks (default %(default)s)")


def _add_difficulty(p):
    p.add_argument("--alpha", type=_unit, default=DEFAULT_ALPHA,
                   help=f"token-probability quantile (default %(default)s; {UNSPECIFIED})")
    p.add_argument("--tau1", type=float, default=DEFAULT_TAU1,
                   help=f"easy/medium threshold (default %(default)s; {UNSPECIFIED})")
    p.add_argument("--tau2", type=float, default=DEFAULT_TAU2,
                   help=f"medium/hard threshold (default %(default)s; {UNSPECIFIED})")
    p.add_argument("--limit", type=_limit, default=MAX_SEARCH_LIMIT,
                   help="search evaluations per task, at most 20 (default %(default)s)")


def _add_weights(p):
    p.add_argument("--w-c", type=float, default=1.0, help=f"subtask-count weight (default %(default)s; {UNSPECIFIED})")
    p.add_argument("--w-p", type=float, default=0.01, help=f"token weight (default %(default)s; {UNSPECIFIED})")
    p.add_argument("--w-d", type=float, default=5.0, help=f"incoherent-pair weight (default %(default)s; {UNSPECIFIED})")


def _add_routing(p):
    p.add_argument("--decomp-ckpt", help="decomposer policy checkpoint (faithful decomposition when omitted)")
    p.add_argument("--alloc-ckpt", help="allocator policy checkpoint")
    p.add_argument("--fixed-model", help="route every subtask to this model id or name")
    p.add_argument("--decode", choices=["greedy", "quantile"], default="quantile",
                   help=f"allocator decoding (default %(default)s; {UNSPECIFIED})")
    p.add_argument("--confidence", type=_unit, default=0.9,
                   help=f"cumulative mass for quantile decoding (default %(default)s; {UNSPECIFIED})")
    p.add_argument("--prm", action="store_true", help="review weak-model steps with a strong model")
    p.add_argument("--strong-model", help="PRM reviewer (default: the most capable model)")
    p.add_argument("--threshold-model",
                   help=f"steps on models below this one are reviewed (default: weakest large model; {UNSPECIFIED})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="costroute", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"costroute {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    subs = {}

    p = subs["sim-gen"] = sub.add_parser("sim-gen", help="generate simulated tasks")
    _add_common(p)
    p.add_argument("--n", type=int, default=1000, help="number of tasks (default %(default)s)")
    p.add_argument("--k-min", type=int, default=1, help="fewest latent steps (default %(default)s)")
    p.add_argument("--k-max", type=int, default=3, help="most latent steps (default %(default)s)")
    p.add_argument("--difficulty", default="uniform",
                   help="'uniform' on [0, 1] or a fixed difficulty (default %(default)s)")
    p.add_argument("--out", required=True, help="output JSONL")

    p = subs["decomp-dataset"] = sub.add_parser("decomp-dataset", help="rejection-sampled decomposition dataset")
    _add_common(p)
    _add_tasks(p)
    _add_weights(p)
    p.add_argument("--m", type=int, default=4, help=f"candidates per task (default %(default)s; {UNSPECIFIED})")
    p.add_argument("--out", required=True, help="output JSONL")

    p = subs["alloc-dataset"] = sub.add_parser("alloc-dataset", help="grouped-search allocation dataset")
    _add_common(p)
    _add_tasks(p)
    _add_difficulty(p)
    p.add_argument("--decomp-ckpt", help="decomposer policy checkpoint (faithful decomposition when omitted)")
    p.add_argument("--out", required=True, help="output JSONL")

    p = subs["search"] = sub.add_parser("search", help="run grouped search and keep every evaluated scheme")
    _add_common(p)
    _add_tasks(p)
    _add_difficulty(p)
    p.add_argument("--decomp-ckpt", help="decomposer policy checkpoint (faithful decomposition when omitted)")
    p.add_argument("--out", required=True, help="output JSONL of search traces")

    p = subs["train"] = sub.add_parser("train", help="supervised warm start, then alternating GRPO")
    _add_common(p)
    _add_tasks(p)
    _add_difficulty(p)
    p.add_argument("--alloc-data", help="allocation dataset for the allocator warm start")
    p.add_argument("--sft-l2", type=float, default=1e-7, help=f"warm-start L2 penalty (default %(default)s; {UNSPECIFIED})")
    p.add_argument("--sft-max-iter", type=int, default=5000, help="warm-start optimiser iterations (default %(default)s)")
    p.add_argument("--decomp-init", choices=["prior", "uniform"], default="prior",
                   help=f"decomposer starting policy (default %(default)s; {UNSPECIFIED})")
    p.add_argument("--decomp-prior-mass", type=_unit, default=0.7,
                   help=f"probability the starting decomposer gives the faithful split (default %(default)s; {UNSPECIFIED})")
    p.add_argument("--rounds", type=int, default=6, help=f"alternating rounds (default %(default)s; {UNSPECIFIED})")
    p.add_argument("--group-size", type=int, default=8, help=f"rollouts per group (default %(default)s; {UNSPECIFIED})")
    p.add_argument("--clip-eps", type=float, default=0.2, help=f"ratio clip (default %(default)s; {UNSPECIFIED})")
    p.add_argument("--kl-beta", type=float, default=0.01, help=f"KL weight (default %(default)s; {UNSPECIFIED})")
    p.add_argument("--lr", type=float, default=0.05, help=f"learning rate (default %(default)s; {UNSPECIFIED})")
    p.add_argument("--iterations", type=int, default=30, help=f"batches per round (default %(default)s; {UNSPECIFIED})")
    p.add_argument("--batch-size", type=int, default=64, help=f"groups per batch (default %(default)s; {UNSPECIFIED})")
    p.add_argument("--inner-steps", type=int, default=4, help=f"updates per batch (default %(default)s; {UNSPECIFIED})")
    p.add_argument("--ref-policy", choices=REF_MODES, default="round",
                   help=f"KL reference: round-start snapshot or starting policy (default %(default)s; {UNSPECIFIED})")
    p.add_argument("--out-dir", required=True, help="directory for decomp.ckpt, alloc.ckpt, history.jsonl")

    p = subs["route"] = sub.add_parser("route", help="route tasks and write traces")
    _add_common(p)
    _add_tasks(p)
    _add_difficulty(p)
    _add_routing(p)
    p.add_argument("--out", required=True, help="output JSONL of traces")

    p = subs["eval"] = sub.add_parser("eval", help="route tasks and report accuracy, cost and quality metrics")
    _add_common(p)
    _add_tasks(p)
    _add_difficulty(p)
    _add_routing(p)
    _add_weights(p)
    p.add_argument("--labels", help="allocation dataset whose labels give the MAE")
    p.add_argument("--out", required=True, help="output report JSON")
    p.add_argument("--traces-out", help="also write the routed traces here")

    parser._subs = subs  # noqa: SLF001
    return parser


def _apply_config(parser, argv) -> None:
    """Load ``--config`` and install its values as subcommand defaults."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config is None:
        return
    path = _require(known.config, "config file")
    try:
        doc = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"cannot parse {path}: {exc}") from None
    command = next((a for a in argv if a in COMMANDS), None)
    if command is None:
        return
    sub = parser._subs[command]  # noqa: SLF001
    dests = {a.dest for a in sub._actions}  # noqa: SLF001
    values = {k.replace("-", "_"): v for k, v in doc.items() if not isinstance(v, dict)}
    section = doc.get(command, {})
    for k, v in section.items():
        key = k.replace("-", "_")
        if key not in dests:
            raise UsageError(f"{path}: [{command}] has no setting {k!r}")
        values[key] = v
    sub.set_defaults(**{k: v for k, v in values.items() if k in dests and k != "config"})


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"costroute: error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_help(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        summary = COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"costroute: error: {exc}", file=sys.stderr)
        return 2
    except (RouterError, ValueError) as exc:
        print(json.dumps({"command": args.command, "ok": False, "error": type(exc).__name__,
                          "message": str(exc)}))
        return 1
    print(json.dumps({"command": args.command, "ok": True, **summary}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
