"""Time the compiled kernels against the pure-Python fallback.

    python benchmarks/bench_kernels.py --sequences 5000 --states 20000
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from mdprec import kernels


def skip_workload(n_seq: int, n_items: int, seed: int):
    rng = np.random.default_rng(seed)
    lengths = rng.integers(2, 15, size=n_seq)
    offsets = np.concatenate(([0], np.cumsum(lengths))).astype(np.int64)
    flat = rng.integers(0, n_items, size=int(offsets[-1])).astype(np.int64)
    return flat, offsets


def eval_workload(n_states: int, fanout: int, seed: int):
    rng = np.random.default_rng(seed)
    indptr = np.arange(0, (n_states + 1) * fanout, fanout, dtype=np.int64)
    prob = rng.dirichlet(np.ones(fanout), size=n_states).ravel()
    nxt = rng.integers(-1, n_states, size=n_states * fanout).astype(np.int64)
    rew = rng.uniform(0, 10, size=n_states * fanout)
    return indptr, prob, nxt, rew


def best_of(fn, repeat: int) -> float:
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sequences", type=int, default=3000)
    ap.add_argument("--items", type=int, default=200)
    ap.add_argument("--order", type=int, default=3)
    ap.add_argument("--states", type=int, default=10000)
    ap.add_argument("--fanout", type=int, default=8)
    ap.add_argument("--sweeps", type=int, default=20)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    impls = kernels.backends()
    if "cython" not in impls:
        print("compiled kernels unavailable; only the fallback can be timed")

    flat, offsets = skip_workload(args.sequences, args.items, args.seed)
    chain = eval_workload(args.states, args.fanout, args.seed)
    order = np.arange(args.states - 1, -1, -1, dtype=np.int64)

    rows = []
    for name in sorted(impls):
        t_skip = best_of(
            lambda: kernels.skip_pairs(flat, offsets, args.order, True, impl=name), args.repeat
        )

        def run_eval():
            values = np.zeros(args.states)
            kernels.evaluate_policy(*chain, 0.95, values, order, 0.0, args.sweeps, impl=name)

        t_eval = best_of(run_eval, args.repeat)
        rows.append((name, t_skip, t_eval))

    print(f"skip_pairs: {args.sequences} sequences, {flat.size} items, order {args.order}")
    print(f"evaluate_policy: {args.states} states x {args.fanout} successors, {args.sweeps} sweeps")
    print(f"{'backend':<8} {'skip_pairs [s]':>15} {'evaluate [s]':>13}")
    for name, a, b in rows:
        print(f"{name:<8} {a:>15.4f} {b:>13.4f}")
    if len(rows) == 2:
        (_, ca, cb), (_, pa, pb) = rows
        print(f"{'speedup':<8} {pa / ca:>14.1f}x {pb / cb:>12.1f}x")


if __name__ == "__main__":
    main()
