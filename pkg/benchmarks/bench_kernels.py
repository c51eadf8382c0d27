"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Prints one line per kernel and backend with the best time per call.
"""

import argparse
import timeit

import numpy as np

from costroute import _pykernels
from costroute.kernels import grpo_terms as dispatched_grpo_terms

try:
    from costroute import _ckernels
except ImportError:
    _ckernels = None


def grpo_case(rng, steps=64 * 8 * 3, actions=9):
    logits = rng.normal(size=(steps, actions))
    acts = rng.integers(actions, size=steps).astype(np.int64)
    lp = _pykernels.log_softmax(logits)
    old = lp[np.arange(steps), acts] + rng.normal(scale=0.1, size=steps)
    ref = _pykernels.log_softmax(logits + rng.normal(scale=0.3, size=logits.shape))
    adv = rng.normal(size=steps)
    weight = np.full(steps, 1.0 / steps)
    return logits, acts, old, ref, adv, weight, 0.2, 0.01


def scheme_case(rng, k=3, pool=9):
    cost = rng.integers(0, 10_000, size=(k, pool)).astype(np.int64)
    feasible = rng.random((k, pool)) < 0.5
    feasible[:, -1] = True
    return cost, feasible


def best_of(fn, repeat, number):
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    g = grpo_case(rng)
    s = scheme_case(rng)
    rows = [
        ("grpo_terms", "python", lambda: _pykernels.grpo_terms(*g), 200),
        ("min_cost_scheme", "python", lambda: _pykernels.min_cost_scheme(*s), 200),
    ]
    if _ckernels is not None:
        rows += [
            ("grpo_terms", "cython", lambda: dispatched_grpo_terms(*g), 200),
            ("min_cost_scheme", "cython", lambda: _ckernels.min_cost_scheme(*s), 200),
        ]
        a, b = _pykernels.grpo_terms(*g), _ckernels.grpo_terms(*g)
        assert np.isclose(a[0], b[0]) and np.allclose(a[2], b[2]), "backends disagree"
    else:
        print("compiled extension not built; timing the fallback only")
    times = {}
    for name, backend, fn, number in rows:
        t = best_of(fn, args.repeat, number)
        times[(name, backend)] = t
        print(f"{name:16s} {backend:7s} {t * 1e6:10.1f} us/call")
    for name in ("grpo_terms", "min_cost_scheme"):
        if (name, "cython") in times:
            print(f"{name:16s} speedup {times[(name, 'python')] / times[(name, 'cython')]:.1f}x")


if __name__ == "__main__":
    main()
