"""Kernel dispatch: the compiled extension when built, else the numpy fallback.

Set ``COSTROUTE_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _pykernels

BACKEND = "python"
grpo_terms = _pykernels.grpo_terms
min_cost_scheme = _pykernels.min_cost_scheme

if os.environ.get("COSTROUTE_PURE_PYTHON") != "1":
    try:
        from . import _ckernels
    except ImportError:
        pass
    else:
        import numpy as np

        BACKEND = "cython"

        def grpo_terms(logits, actions, old_logp, ref_logp, adv, weight, eps, beta):
            c = np.ascontiguousarray
            return _ckernels.grpo_terms(
                c(logits, dtype=np.float64),
                c(actions, dtype=np.int64),
                c(old_logp, dtype=np.float64),
                c(ref_logp, dtype=np.float64),
                c(adv, dtype=np.float64),
                c(weight, dtype=np.float64),
                float(eps),
                float(beta),
            )

        min_cost_scheme = _ckernels.min_cost_scheme

__all__ = ["BACKEND", "grpo_terms", "min_cost_scheme"]
