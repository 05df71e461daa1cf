import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mdprec import kernels

IMPLS = kernels.backends()
needs_both = pytest.mark.skipif(len(IMPLS) < 2, reason="compiled kernels not built")

seqs_st = st.lists(st.lists(st.integers(0, 6), min_size=1, max_size=12), min_size=1, max_size=8)


def _flat(seqs):
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    offsets = np.concatenate(([0], np.cumsum(lengths))).astype(np.int64)
    flat = np.array([x for s in seqs for x in s], dtype=np.int64)
    return flat, offsets


def test_skip_pairs_small_example():
    flat, offsets = _flat([[7, 8, 9]])
    ctx, tgt, w = kernels.skip_pairs(flat, offsets, 2, True)
    got = sorted(zip(map(tuple, ctx.tolist()), tgt.tolist(), w.tolist()))
    assert got == sorted(
        [
            ((-1, -1), 7, 1.0),
            ((-1, -1), 8, 0.5),
            ((-1, -1), 9, 0.25),
            ((-1, 7), 8, 1.0),
            ((-1, 7), 9, 0.5),
            ((7, 8), 9, 1.0),
        ]
    )
    ctx, tgt, w = kernels.skip_pairs(flat, offsets, 2, False)
    assert tgt.tolist() == [7, 8, 9] and w.tolist() == [1.0, 1.0, 1.0]


@needs_both
@settings(max_examples=60)
@given(seqs_st, st.integers(1, 4), st.booleans())
def test_skip_pairs_backends_agree(seqs, order, skipping):
    flat, offsets = _flat(seqs)
    a = kernels.skip_pairs(flat, offsets, order, skipping, impl="cython")
    b = kernels.skip_pairs(flat, offsets, order, skipping, impl="python")
    for x, y in zip(a, b):
        assert np.array_equal(x, y)


def _random_chain(rng, n_states, n_items, density=0.5):
    indptr = [0]
    prob, nxt, rew = [], [], []
    for _ in range(n_states):
        k = max(1, int(rng.binomial(n_items, density)))
        p = rng.dirichlet(np.ones(k))
        prob.extend(p)
        nxt.extend(rng.integers(-1, n_states, size=k))
        rew.extend(rng.uniform(0, 5, size=k))
        indptr.append(len(prob))
    return (
        np.array(indptr, dtype=np.int64),
        np.array(prob),
        np.array(nxt, dtype=np.int64),
        np.array(rew),
    )


def _dense_solve(indptr, prob, nxt, rew, gamma):
    n = len(indptr) - 1
    A = np.eye(n)
    b = np.zeros(n)
    for s in range(n):
        for j in range(indptr[s], indptr[s + 1]):
            b[s] += prob[j] * rew[j]
            if nxt[j] >= 0:
                A[s, nxt[j]] -= gamma * prob[j]
    return np.linalg.solve(A, b)


@pytest.mark.parametrize("impl", sorted(IMPLS))
@pytest.mark.parametrize("seed", range(5))
def test_evaluate_policy_matches_linear_solve(impl, seed):
    rng = np.random.default_rng(seed)
    chain = _random_chain(rng, 30, 8)
    values = np.zeros(30)
    order = np.arange(29, -1, -1, dtype=np.int64)
    sweeps, delta = kernels.evaluate_policy(*chain, 0.9, values, order, 1e-12, 100000, impl=impl)
    assert delta < 1e-12 and sweeps > 1
    np.testing.assert_allclose(values, _dense_solve(*chain, 0.9), rtol=0, atol=1e-9)


@needs_both
@pytest.mark.parametrize("seed", range(5))
def test_evaluate_policy_bitwise_parity(seed):
    rng = np.random.default_rng(100 + seed)
    chain = _random_chain(rng, 40, 10)
    order = rng.permutation(40).astype(np.int64)
    out = []
    for impl in ("cython", "python"):
        v = np.zeros(40)
        res = kernels.evaluate_policy(*chain, 0.95, v, order, 1e-10, 100000, impl=impl)
        out.append((res, v))
    assert out[0][0] == out[1][0]
    assert np.array_equal(out[0][1], out[1][1])


def test_evaluate_policy_sweep_cap():
    rng = np.random.default_rng(0)
    chain = _random_chain(rng, 10, 4)
    v = np.zeros(10)
    sweeps, delta = kernels.evaluate_policy(*chain, 0.99, v, np.arange(10), 1e-15, 3)
    assert sweeps == 3 and delta > 1e-15


def test_backend_name():
    assert kernels.BACKEND in ("cython", "python")
    assert kernels.BACKEND in IMPLS


def test_env_var_forces_fallback():
    import os
    import subprocess
    import sys

    env = dict(os.environ, MDPREC_PURE_PYTHON="1")
    out = subprocess.run(
        [sys.executable, "-c", "from mdprec import kernels; print(kernels.BACKEND)"],
        env=env,
        capture_output=True,
        text=True,
        check=True,
    )
    assert out.stdout.strip() == "python"
