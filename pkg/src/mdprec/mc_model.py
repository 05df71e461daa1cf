"""Enhanced k-order Markov-chain predictor.

Counts (optionally with exponentially decaying skip counts) are turned into
row-stochastic transition tables per order, optionally blended with the rows
of positionwise-similar states, and mixed over orders with fixed weights.
"""

from __future__ import annotations

import datetime as _dt
import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from . import kernels
from .domain import (
    MISSING,
    DataError,
    ItemCatalog,
    State,
    check_order,
    state_from_history,
    unordered_key,
)
from .ingestion import SessionSet

MODEL_FORMAT = "mdprec-mc-model"
MODEL_VERSION = 1


@dataclass
class SparseRows:
    """Sparse ``state -> {item: value}`` table stored as CSR over items."""

    order: int
    states: list[State]
    matrix: sp.csr_matrix

    def __post_init__(self) -> None:
        self.matrix = sp.csr_matrix(self.matrix)
        self.matrix.sort_indices()
        self.index = {s: i for i, s in enumerate(self.states)}
        if len(self.index) != len(self.states):
            raise ValueError("duplicate states")
        self._indptr = self.matrix.indptr
        self._indices = self.matrix.indices
        self._data = self.matrix.data

    @property
    def n_items(self) -> int:
        return self.matrix.shape[1]

    def __len__(self) -> int:
        return len(self.states)

    def __contains__(self, state: State) -> bool:
        return state in self.index

    def row_arrays(self, state: State) -> tuple[np.ndarray, np.ndarray] | None:
        r = self.index.get(state)
        if r is None:
            return None
        lo, hi = self._indptr[r], self._indptr[r + 1]
        return self._indices[lo:hi], self._data[lo:hi]

    def row(self, state: State) -> dict[int, float]:
        arrays = self.row_arrays(state)
        if arrays is None:
            return {}
        return {int(i): float(v) for i, v in zip(*arrays)}

    def get(self, state: State, item: int) -> float:
        return self.row(state).get(item, 0.0)


class CountTable(SparseRows):
    """Fractional transition counts of one order."""


class TransitionModel(SparseRows):
    """Row-normalized transition probabilities of one order."""


def _count(
    sessions: SessionSet | Sequence[Sequence[int]],
    order: int,
    skipping: bool,
    unordered: bool = False,
    n_items: int | None = None,
) -> CountTable:
    if order < 1:
        raise ValueError("order must be >= 1")
    if isinstance(sessions, SessionSet):
        seqs = sessions.item_sequences()
        n_items = len(sessions.catalog) if n_items is None else n_items
    else:
        seqs = [list(s) for s in sessions]
    lengths = np.fromiter((len(s) for s in seqs), dtype=np.int64, count=len(seqs))
    offsets = np.concatenate(([0], np.cumsum(lengths)))
    flat = np.fromiter((x for s in seqs for x in s), dtype=np.int64, count=int(offsets[-1]))
    if n_items is None:
        n_items = int(flat.max()) + 1 if flat.size else 0

    contexts, targets, weights = kernels.skip_pairs(flat, offsets, order, skipping)
    live = weights > 0.0  # very distant skips underflow to zero
    contexts, targets, weights = contexts[live], targets[live], weights[live]
    if unordered:
        # MISSING sorts first, so this yields the padded sorted bag
        contexts = np.sort(contexts, axis=1)
    if targets.size == 0:
        return CountTable(order, [], sp.csr_matrix((0, n_items)))

    keys = np.column_stack((contexts, targets))
    base = n_items + 1
    if base ** (order + 1) < 2**62:
        # one int64 code per (context, target); sorts like the rows themselves
        codes = np.zeros(len(keys), dtype=np.int64)
        for col in range(order + 1):
            codes = codes * base + (keys[:, col] + 1)
        _, first, inverse = np.unique(codes, return_index=True, return_inverse=True)
        uniq = keys[first]
    else:
        uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    sums = np.bincount(inverse.reshape(-1), weights=weights, minlength=len(uniq))
    ctx = uniq[:, :order]
    change = np.any(ctx[1:] != ctx[:-1], axis=1)
    starts = np.concatenate(([0], np.flatnonzero(change) + 1))
    indptr = np.append(starts, len(uniq))
    states = [tuple(int(x) for x in row) for row in ctx[starts]]
    matrix = sp.csr_matrix((sums, uniq[:, order], indptr), shape=(len(states), n_items))
    return CountTable(order, states, matrix)


def count_base(train, order: int, unordered: bool = False, n_items: int | None = None) -> CountTable:
    """Maximum-likelihood transition counts.

    Every sequence contributes its first item from the all-MISSING state and
    one count per adjacent pair, with short histories MISSING-padded.
    """
    return _count(train, order, False, unordered, n_items)


def count_with_skipping(
    train, order: int, unordered: bool = False, n_items: int | None = None
) -> CountTable:
    """Base counts plus ``2 ** -(j - (p + i))`` for every later item ``x_j``."""
    return _count(train, order, True, unordered, n_items)


def normalize(counts: SparseRows) -> TransitionModel:
    """Divide each row by its total; rows summing to zero are dropped."""
    m = counts.matrix
    totals = np.asarray(m.sum(axis=1)).ravel()
    keep = np.flatnonzero(totals > 0)
    m = m[keep]
    totals = totals[keep]
    data = m.data / np.repeat(totals, np.diff(m.indptr))
    out = sp.csr_matrix((data, m.indices, m.indptr), shape=m.shape)
    return TransitionModel(counts.order, [counts.states[i] for i in keep], out)


def similarity(s1: State, s2: State) -> float:
    """Positionwise match score; slot ``m`` (1-based) is worth ``m + 1``."""
    if len(s1) != len(s2):
        raise ValueError("states must have the same order")
    return float(
        sum(m + 2 for m, (a, b) in enumerate(zip(s1, s2)) if a == b and a != MISSING)
    )


def _position_indicator(slots: np.ndarray, n_items: int) -> sp.csr_matrix:
    rows = np.flatnonzero(slots != MISSING)
    return sp.csr_matrix(
        (np.ones(rows.size), (rows, slots[rows])), shape=(slots.size, n_items)
    )


def apply_clustering(model: TransitionModel) -> TransitionModel:
    """Blend each row half-and-half with its similarity-weighted neighbour mix.

    ``simcount(s, .) = sum_t sim(s, t) * old(t, .)`` over all stored states,
    ``s`` included. Because the similarity is a sum over positions, the sum
    splits into per-(position, item) posting totals: for each position the
    rows of all states holding item ``x`` there are added once, and each state
    then reads back the totals for its own items. Only states sharing a slot
    with ``s`` ever contribute.
    """
    n = len(model)
    if n == 0:
        return model
    T = model.matrix
    slots = np.array(model.states, dtype=np.int64).reshape(n, model.order)
    simcount = sp.csr_matrix(T.shape)
    for m in range(model.order):
        P = _position_indicator(slots[:, m], model.n_items)
        postings = (P.T @ T).tocsr()
        simcount = simcount + (m + 2) * (P @ postings)
    simcount = sp.csr_matrix(simcount)
    totals = np.asarray(simcount.sum(axis=1)).ravel()
    has_sim = totals > 0
    sim_scale = np.divide(0.5, totals, out=np.zeros_like(totals), where=has_sim)
    old_scale = np.where(has_sim, 0.5, 1.0)
    blended = sp.diags(old_scale) @ T + sp.diags(sim_scale) @ simcount
    blended = sp.csr_matrix(blended)
    blended.eliminate_zeros()
    return TransitionModel(model.order, list(model.states), blended)


@dataclass
class MixtureModel:
    """Uniformly weighted mixture of per-order transition models."""

    components: list[TransitionModel]
    catalog: ItemCatalog
    weights: list[float] | None = None
    skipping: bool = False
    clustering: bool = False
    unordered: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.components:
            raise ValueError("a mixture needs at least one component")
        if self.weights is None:
            self.weights = [1.0 / len(self.components)] * len(self.components)
        if len(self.weights) != len(self.components):
            raise ValueError("one weight per component")
        if any(w < 0 for w in self.weights) or abs(sum(self.weights) - 1.0) > 1e-12:
            raise ValueError("mixture weights must be nonnegative and sum to 1")
        self._key: Callable[[State], State] = unordered_key if self.unordered else (lambda s: s)

    @property
    def orders(self) -> list[int]:
        return [c.order for c in self.components]

    @property
    def k(self) -> int:
        return max(self.orders)

    @property
    def n_items(self) -> int:
        return len(self.catalog)

    @property
    def name(self) -> str:
        base = "UMC" if self.unordered else "MC"
        tags = "".join(["SK" if self.skipping else "", "SM" if self.clustering else ""])
        return base + "".join(str(o) for o in self.orders) + tags

    def key(self, state: State) -> State:
        return self._key(state)

    def component(self, order: int) -> TransitionModel:
        for c in self.components:
            if c.order == order:
                return c
        raise KeyError(order)

    def initial_row(self) -> tuple[np.ndarray, np.ndarray]:
        low = min(self.components, key=lambda c: c.order)
        arrays = low.row_arrays((MISSING,) * low.order)
        if arrays is None:
            raise DataError("model has no initial-state row")
        return arrays


def predict(model: MixtureModel, history: Sequence[int]) -> np.ndarray:
    """Next-item distribution as a dense vector over ItemIds.

    Components whose context row is absent drop out and the remaining weights
    are renormalized; with no live component the initial-state row of the
    lowest order answers.
    """
    out = np.zeros(model.n_items)
    live = []
    for comp, w in zip(model.components, model.weights):
        arrays = comp.row_arrays(model.key(state_from_history(history, comp.order)))
        if arrays is not None and w > 0:
            live.append((w, arrays))
    if not live:
        idx, val = model.initial_row()
        out[idx] = val
        return out
    total = sum(w for w, _ in live)
    for w, (idx, val) in live:
        out[idx] += (w / total) * val
    return out


def rank_vector(p: np.ndarray) -> list[int]:
    nz = np.flatnonzero(p > 0)
    return nz[np.lexsort((nz, -p[nz]))].tolist()


def rank(model: MixtureModel, history: Sequence[int]) -> list[int]:
    """Items with positive predicted probability, most likely first.

    Ties go to the smaller ItemId.
    """
    return rank_vector(predict(model, history))


def build(
    train: SessionSet,
    k: int,
    skipping: bool = False,
    clustering: bool = False,
    unordered: bool = False,
    orders: Sequence[int] | None = None,
) -> MixtureModel:
    """Estimate a mixture over ``orders`` (default ``1..k``)."""
    check_order(k)
    if len(train) == 0:
        raise DataError("empty training set")
    orders = sorted(set(orders)) if orders else list(range(1, k + 1))
    for o in orders:
        check_order(o)
    if max(orders) != k:
        raise ValueError(f"highest mixture order must equal k={k}")
    components = []
    counter = count_with_skipping if skipping else count_base
    for o in orders:
        tm = normalize(counter(train, o, unordered=unordered, n_items=len(train.catalog)))
        if clustering:
            tm = apply_clustering(tm)
        components.append(tm)
    return MixtureModel(
        components,
        train.catalog,
        skipping=skipping,
        clustering=clustering,
        unordered=unordered,
    )


def model_to_json(model: MixtureModel, timestamp: bool = True) -> dict:
    comps = []
    for comp in model.components:
        rows = []
        for s in comp.states:
            idx, val = comp.row_arrays(s)
            rows.append([list(s), [[int(i), float(v)] for i, v in zip(idx, val)]])
        comps.append({"order": comp.order, "rows": rows})
    doc = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "metadata": {
            "name": model.name,
            "k": model.k,
            "orders": model.orders,
            "weights": list(model.weights),
            "skipping": model.skipping,
            "clustering": model.clustering,
            "unordered": model.unordered,
            **model.meta,
        },
        "items": list(model.catalog.keys),
        "components": comps,
    }
    if timestamp:
        doc["created"] = _dt.datetime.now(_dt.timezone.utc).isoformat()
    return doc


def model_from_json(doc: dict, catalog: ItemCatalog | None = None) -> MixtureModel:
    if doc.get("format") != MODEL_FORMAT:
        raise DataError("not a model file")
    if doc.get("version") != MODEL_VERSION:
        raise DataError(f"unsupported model version {doc.get('version')}")
    meta = doc["metadata"]
    catalog = catalog or ItemCatalog(list(doc["items"]))
    n_items = len(catalog)
    comps = []
    for c in doc["components"]:
        order = int(c["order"])
        states, indptr, indices, data = [], [0], [], []
        for slots, pairs in c["rows"]:
            if len(slots) != order:
                raise DataError(f"row state {slots} does not have order {order}")
            states.append(tuple(int(x) for x in slots))
            total = 0.0
            for i, v in pairs:
                i, v = int(i), float(v)
                if not 0 <= i < n_items or not 0.0 <= v <= 1.0:
                    raise DataError(f"bad entry ({i}, {v}) in row {slots}")
                indices.append(i)
                data.append(v)
                total += v
            if abs(total - 1.0) > 1e-9:
                raise DataError(f"row {slots} sums to {total}, not 1")
            indptr.append(len(indices))
        matrix = sp.csr_matrix(
            (np.array(data, dtype=np.float64), np.array(indices, dtype=np.int64), np.array(indptr)),
            shape=(len(states), n_items),
        )
        comps.append(TransitionModel(order, states, matrix))
    extra = {
        key: val
        for key, val in meta.items()
        if key not in {"name", "k", "orders", "weights", "skipping", "clustering", "unordered"}
    }
    return MixtureModel(
        comps,
        catalog,
        weights=[float(w) for w in meta["weights"]],
        skipping=bool(meta["skipping"]),
        clustering=bool(meta["clustering"]),
        unordered=bool(meta["unordered"]),
        meta=extra,
    )


def save_model(model: MixtureModel, path: str, timestamp: bool = True) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_json(model, timestamp), fh)
        fh.write("\n")


def load_model(path: str) -> MixtureModel:
    with open(path, encoding="utf-8") as fh:
        return model_from_json(json.load(fh))
