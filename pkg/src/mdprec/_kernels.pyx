# cython: language_level=3
"""Compiled inner loops. Semantics match ``_fallback`` operation for operation."""

import numpy as np

from libc.math cimport ldexp, fabs


def skip_pairs(const long long[:] flat, const long long[:] offsets, int order, bint skipping):
    cdef Py_ssize_t n_seq = offsets.shape[0] - 1
    cdef Py_ssize_t s, n, e, j, m, pos, start, total = 0, row = 0
    for s in range(n_seq):
        n = offsets[s + 1] - offsets[s]
        total += n * (n + 1) // 2 if skipping else n
    contexts_arr = np.empty((total, order), dtype=np.int64)
    targets_arr = np.empty(total, dtype=np.int64)
    weights_arr = np.empty(total, dtype=np.float64)
    cdef long long[:, :] contexts = contexts_arr
    cdef long long[:] targets = targets_arr
    cdef double[:] weights = weights_arr
    for s in range(n_seq):
        start = offsets[s]
        n = offsets[s + 1] - start
        for e in range(n):
            for j in range(e, n if skipping else e + 1):
                for m in range(order):
                    pos = e - order + m
                    contexts[row, m] = flat[start + pos] if pos >= 0 else -1
                targets[row] = flat[start + j]
                weights[row] = ldexp(1.0, <int>(e - j))
                row += 1
    return contexts_arr, targets_arr, weights_arr


def evaluate_policy(
    const long long[:] indptr,
    const double[:] prob,
    const long long[:] nxt,
    const double[:] rew,
    double gamma,
    double[:] values,
    const long long[:] sweep_order,
    double tol,
    long long max_sweeps,
):
    cdef Py_ssize_t i, j, s
    cdef long long sweep, nx
    cdef double acc, w, delta = 0.0, d
    for sweep in range(max_sweeps):
        delta = 0.0
        for i in range(sweep_order.shape[0]):
            s = sweep_order[i]
            acc = 0.0
            for j in range(indptr[s], indptr[s + 1]):
                w = rew[j]
                nx = nxt[j]
                if nx >= 0:
                    w = w + gamma * values[nx]
                acc = acc + prob[j] * w
            d = fabs(acc - values[s])
            if d > delta:
                delta = d
            values[s] = acc
        if delta < tol:
            return sweep + 1, delta
    return max_sweeps, delta
