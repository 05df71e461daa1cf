"""Kernel selection: the compiled extension when importable, else pure Python.

Set ``MDPREC_PURE_PYTHON=1`` to force the fallback.
"""

from __future__ import annotations

import os

import numpy as np

from . import _fallback

BACKEND = "python"
_impl = _fallback

if not os.environ.get("MDPREC_PURE_PYTHON"):
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # pragma: no cover - depends on build
        _impl = _fallback


def backends() -> dict:
    """All importable kernel modules keyed by name."""
    out = {"python": _fallback}
    try:
        from . import _kernels

        out["cython"] = _kernels
    except ImportError:  # pragma: no cover
        pass
    return out


def _resolve(impl):
    if impl is None:
        return _impl
    if isinstance(impl, str):
        try:
            return backends()[impl]
        except KeyError:
            raise ValueError(f"unknown kernel backend {impl!r}") from None
    return impl


def skip_pairs(flat, offsets, order, skipping, impl=None):
    """Expand sequences into (context, target, weight) triples.

    For every sequence, every context end ``e`` (the number of items already
    consumed, 0 included) and every later target ``j`` the weight is
    ``2 ** -(j - e)`` in 0-based target terms, so the direct successor gets 1.
    Without skipping only direct successors are emitted.
    """
    impl = _resolve(impl)
    return impl.skip_pairs(
        np.ascontiguousarray(flat, dtype=np.int64),
        np.ascontiguousarray(offsets, dtype=np.int64),
        int(order),
        bool(skipping),
    )


def evaluate_policy(indptr, prob, nxt, rew, gamma, values, sweep_order, tol, max_sweeps, impl=None):
    """In-place Gauss-Seidel policy evaluation; returns ``(sweeps, residual)``.

    ``values`` is updated in place in ``sweep_order``. Row ``s`` holds the
    policy's transition probabilities ``prob``, the immediate reward ``rew``
    of each successor and its state index ``nxt`` (-1 when the successor has
    no value of its own).
    """
    impl = _resolve(impl)
    if values.dtype != np.float64 or not values.flags.c_contiguous:
        raise TypeError("values must be a contiguous float64 array")
    sweeps, residual = impl.evaluate_policy(
        np.ascontiguousarray(indptr, dtype=np.int64),
        np.ascontiguousarray(prob, dtype=np.float64),
        np.ascontiguousarray(nxt, dtype=np.int64),
        np.ascontiguousarray(rew, dtype=np.float64),
        float(gamma),
        values,
        np.ascontiguousarray(sweep_order, dtype=np.int64),
        float(tol),
        int(max_sweeps),
    )
    return int(sweeps), float(residual)
