# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the kernels in ``_pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log

cnp.import_array()


def grpo_terms(double[:, ::1] logits, long long[::1] actions, double[::1] old_logp,
               double[:, ::1] ref_logp, double[::1] adv, double[::1] weight,
               double eps, double beta):
    cdef Py_ssize_t n = logits.shape[0]
    cdef Py_ssize_t a = logits.shape[1]
    cdef Py_ssize_t i, j, act
    cdef double m, z, lse, lp_a, ratio, clipped, u, c, kl, w, coef, surr
    cdef double objective = 0.0, kl_total = 0.0
    out = np.zeros((n, a), dtype=np.float64)
    cdef double[:, ::1] d = out
    cdef double[::1] logp = np.empty(a, dtype=np.float64)
    cdef double[::1] p = np.empty(a, dtype=np.float64)

    for i in range(n):
        m = logits[i, 0]
        for j in range(1, a):
            if logits[i, j] > m:
                m = logits[i, j]
        z = 0.0
        for j in range(a):
            z += exp(logits[i, j] - m)
        lse = m + log(z)
        for j in range(a):
            logp[j] = logits[i, j] - lse
            p[j] = exp(logp[j])

        act = actions[i]
        lp_a = logp[act]
        ratio = exp(lp_a - old_logp[i])
        clipped = ratio
        if clipped < 1.0 - eps:
            clipped = 1.0 - eps
        elif clipped > 1.0 + eps:
            clipped = 1.0 + eps
        u = ratio * adv[i]
        c = clipped * adv[i]
        surr = u if u < c else c

        kl = 0.0
        for j in range(a):
            kl += p[j] * (logp[j] - ref_logp[i, j])

        w = weight[i]
        objective += w * (surr - beta * kl)
        kl_total += w * kl

        coef = u if u <= c else 0.0
        for j in range(a):
            d[i, j] = w * (-coef * p[j] - beta * p[j] * (logp[j] - ref_logp[i, j] - kl))
        d[i, act] += w * coef
    return objective, kl_total, out


def min_cost_scheme(step_cost, feasible):
    cdef long long[:, ::1] cost = np.ascontiguousarray(step_cost, dtype=np.int64)
    cdef unsigned char[:, ::1] ok = np.ascontiguousarray(feasible, dtype=np.uint8)
    cdef Py_ssize_t k = cost.shape[0]
    cdef Py_ssize_t n = cost.shape[1]
    cdef Py_ssize_t i
    cdef long long total, best_cost = 0
    cdef bint found = False, good
    idx_arr = np.zeros(k, dtype=np.int64)
    best_arr = np.zeros(k, dtype=np.int64)
    cdef long long[::1] idx = idx_arr
    cdef long long[::1] best = best_arr
    if k == 0:
        return [], 0, False
    while True:
        good = True
        total = 0
        for i in range(k):
            if not ok[i, idx[i]]:
                good = False
                break
            total += cost[i, idx[i]]
        if good and (not found or total < best_cost):
            found = True
            best_cost = total
            for i in range(k):
                best[i] = idx[i]
        # odometer, last position fastest -> lexicographic order
        i = k - 1
        while i >= 0:
            idx[i] += 1
            if idx[i] < n:
                break
            idx[i] = 0
            i -= 1
        if i < 0:
            break
    if not found:
        return [], 0, False
    return [int(v) for v in best_arr], int(best_cost), True
