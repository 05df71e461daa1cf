"""Pure-Python kernels, used when the compiled extension is unavailable."""

from __future__ import annotations

import math

import numpy as np


def skip_pairs(flat, offsets, order: int, skipping: bool):
    flat = [int(x) for x in flat]
    offsets = [int(x) for x in offsets]
    contexts, targets, weights = [], [], []
    for s in range(len(offsets) - 1):
        start, stop = offsets[s], offsets[s + 1]
        n = stop - start
        for e in range(n):
            ctx = [flat[start + e - order + m] if e - order + m >= 0 else -1 for m in range(order)]
            for j in range(e, n if skipping else e + 1):
                contexts.append(ctx)
                targets.append(flat[start + j])
                weights.append(math.ldexp(1.0, e - j))
    return (
        np.array(contexts, dtype=np.int64).reshape(len(targets), order),
        np.array(targets, dtype=np.int64),
        np.array(weights, dtype=np.float64),
    )


def evaluate_policy(indptr, prob, nxt, rew, gamma, values, sweep_order, tol, max_sweeps):
    indptr = indptr.tolist()
    prob = prob.tolist()
    nxt = nxt.tolist()
    rew = rew.tolist()
    order = sweep_order.tolist()
    vals = values.tolist()
    delta = 0.0
    try:
        for sweep in range(max_sweeps):
            delta = 0.0
            for s in order:
                acc = 0.0
                for j in range(indptr[s], indptr[s + 1]):
                    w = rew[j]
                    nx = nxt[j]
                    if nx >= 0:
                        w = w + gamma * vals[nx]
                    acc = acc + prob[j] * w
                d = abs(acc - vals[s])
                if d > delta:
                    delta = d
                vals[s] = acc
            if delta < tol:
                return sweep + 1, delta
        return max_sweeps, delta
    finally:
        values[:] = vals
