"""Synthetic users with a known behaviour model, for closed-loop policy tests.

A simulated user picks the next item from a ground-truth order-k row. When an
item is recommended its probability is multiplied by ``true_alpha`` (capped
at 1) and all other items are scaled down so the row still sums to one.
States without a ground-truth row end the session.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .domain import MISSING, DataError, ItemCatalog, State, advance, items_of, state_from_history
from .ingestion import SessionSet

Recommender = Callable[[Sequence[int]], "int | None"]


@dataclass
class GroundTruth:
    catalog: ItemCatalog
    order: int
    rows: dict[State, np.ndarray]
    true_alpha: float = 1.0
    end_prob: float = 0.0
    name: str = ""

    def __post_init__(self) -> None:
        if self.true_alpha < 1.0:
            raise ValueError("true_alpha must be >= 1")
        if not 0.0 <= self.end_prob <= 1.0:
            raise ValueError("end_prob must be in [0, 1]")
        n = len(self.catalog)
        for s, row in self.rows.items():
            if len(s) != self.order:
                raise ValueError(f"state {s} does not have order {self.order}")
            row = np.asarray(row, dtype=np.float64)
            if row.shape != (n,) or np.any(row < 0) or not math.isclose(row.sum(), 1.0, abs_tol=1e-9):
                raise ValueError(f"row for {s} is not a distribution over {n} items")
            self.rows[s] = row

    @property
    def n_items(self) -> int:
        return len(self.catalog)

    @property
    def rewards(self) -> np.ndarray:
        return np.asarray(self.catalog.rewards, dtype=np.float64)

    @property
    def initial(self) -> State:
        return (MISSING,) * self.order

    def adjusted_row(self, s: State, recommended: int | None) -> np.ndarray | None:
        row = self.rows.get(s)
        if row is None or recommended is None or self.true_alpha == 1.0:
            return row
        q = row[recommended]
        boost = min(self.true_alpha * q, 1.0)
        beta = (1.0 - boost) / (1.0 - q) if q < 1.0 else 0.0
        out = row * beta
        out[recommended] = boost
        return out


    def sample(self, s: State, recommended: int | None, u: float) -> int:
        """Inverse-CDF draw from the adjusted row at ``s`` for a uniform ``u``."""
        cache = self.__dict__.setdefault("_cdf", {})
        cdf = cache.get((s, recommended))
        if cdf is None:
            cdf = np.cumsum(self.adjusted_row(s, recommended))
            cache[(s, recommended)] = cdf
        return int(min(np.searchsorted(cdf, u * cdf[-1], side="right"), cdf.size - 1))


def ground_truth_from_json(doc: Mapping) -> GroundTruth:
    """Parse ``{"order", "items": [{"key", "reward"}], "rows": [...], ...}``.

    Each row is ``{"state": [key or null, ...], "next": {key: prob}}``.
    """
    try:
        order = int(doc["order"])
        items = doc["items"]
        catalog = ItemCatalog(
            [str(it["key"]) for it in items], [float(it.get("reward", 1.0)) for it in items]
        )
        rows = {}
        for row in doc["rows"]:
            slots = tuple(MISSING if k is None else catalog.lookup(k) for k in row["state"])
            if None in slots:
                raise DataError(f"unknown item in ground-truth state {row['state']}")
            vec = np.zeros(len(catalog))
            for key, p in row["next"].items():
                idx = catalog.lookup(key)
                if idx is None:
                    raise DataError(f"unknown item {key!r} in ground-truth row")
                vec[idx] = float(p)
            rows[slots] = vec
        return GroundTruth(
            catalog,
            order,
            rows,
            true_alpha=float(doc.get("true_alpha", 1.0)),
            end_prob=float(doc.get("end_prob", 0.0)),
            name=str(doc.get("name", "")),
        )
    except (KeyError, TypeError) as exc:
        raise DataError(f"malformed ground-truth document: {exc}") from None
    except ValueError as exc:
        raise DataError(str(exc)) from None


def load_ground_truth(path: str) -> GroundTruth:
    with open(path, encoding="utf-8") as fh:
        return ground_truth_from_json(json.load(fh))


def generate_corpus(gt: GroundTruth, n_users: int, max_len: int, seed: int = 0) -> SessionSet:
    """Sessions sampled without recommendations."""
    if n_users < 1:
        raise ValueError("n_users must be >= 1")
    rng = np.random.default_rng(seed)
    sequences = []
    for u in range(n_users):
        s = gt.initial
        seq: list[int] = []
        while len(seq) < max_len:
            if s not in gt.rows:
                break
            u_item, u_end = rng.random(2)
            x = gt.sample(s, None, u_item)
            seq.append(x)
            if u_end < gt.end_prob:
                break
            s = advance(s, x)
        sequences.append((f"u{u}", seq))
    return SessionSet(sequences, gt.catalog, "all")


@dataclass
class Episode:
    items: list[int]
    recommendations: list[int | None]
    total_reward: float
    discounted_reward: float
    acceptances: int


def run_episode(
    gt: GroundTruth,
    recommender: Recommender | None,
    steps: int,
    seed: int | np.random.Generator = 0,
    gamma: float = 0.95,
) -> Episode:
    """Play one session of at most ``steps`` selections.

    Two uniforms per step are drawn up front, so policies sharing a seed see
    the same random stream whatever they recommend.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    rng = np.random.default_rng(seed)
    draws = rng.random((steps, 2))
    rewards = gt.rewards
    s = gt.initial
    history: list[int] = []
    recs: list[int | None] = []
    total = disc = 0.0
    accepted = 0
    for t in range(steps):
        u_item, u_end = draws[t]
        if s not in gt.rows:
            break
        rec = recommender(tuple(history)) if recommender is not None else None
        x = gt.sample(s, rec, u_item)
        recs.append(rec)
        history.append(x)
        accepted += int(x == rec)
        total += rewards[x]
        disc += gamma**t * rewards[x]
        if u_end < gt.end_prob:
            break
        s = advance(s, x)
    return Episode(history, recs, float(total), float(disc), accepted)


@dataclass
class PolicyResult:
    name: str
    mean: float
    stderr: float
    mean_total: float
    acceptance_rate: float
    returns: np.ndarray = field(repr=False)

    def as_row(self) -> dict:
        return {
            "policy": self.name,
            "mean_discounted_reward": self.mean,
            "stderr": self.stderr,
            "mean_total_reward": self.mean_total,
            "acceptance_rate": self.acceptance_rate,
        }


def compare_policies(
    gt: GroundTruth,
    policies: Mapping[str, Recommender | None] | Sequence[tuple[str, Recommender | None]],
    episodes: int,
    steps: int,
    seed: int = 0,
    gamma: float = 0.95,
) -> list[PolicyResult]:
    """Mean discounted reward of each policy over paired episodes."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    named = list(policies.items()) if isinstance(policies, Mapping) else list(policies)
    out = []
    for name, rec in named:
        disc = np.zeros(episodes)
        tot = np.zeros(episodes)
        acc = shown = 0
        for e in range(episodes):
            ep = run_episode(gt, rec, steps, np.random.default_rng([seed, e]), gamma)
            disc[e], tot[e] = ep.discounted_reward, ep.total_reward
            acc += ep.acceptances
            shown += sum(r is not None for r in ep.recommendations)
        stderr = float(disc.std(ddof=1) / math.sqrt(episodes)) if episodes > 1 else 0.0
        out.append(
            PolicyResult(
                name, float(disc.mean()), stderr, float(tot.mean()), acc / shown if shown else 0.0, disc
            )
        )
    return out


def format_table(results: Sequence[PolicyResult]) -> str:
    head = f"{'policy':<10} {'mean':>12} {'stderr':>10} {'total':>12} {'accept':>8}"
    lines = [head, "-" * len(head)]
    for r in results:
        lines.append(
            f"{r.name:<10} {r.mean:>12.4f} {r.stderr:>10.4f} {r.mean_total:>12.4f} "
            f"{r.acceptance_rate:>8.4f}"
        )
    return "\n".join(lines)


def expected_return(
    gt: GroundTruth,
    recommender: Recommender | None,
    gamma: float = 0.95,
    horizon: int | None = None,
) -> float:
    """Exact expected discounted reward of a deterministic recommender.

    The recommender must depend only on the last ``gt.order`` items, so the
    ground-truth states carry everything. Without a horizon the value solves
    a linear system; with one it is the ``horizon``-step backward recursion.
    """
    rewards = gt.rewards
    start = gt.initial
    order = [start]
    seen = {start: 0}
    rec_of: dict[State, int | None] = {}
    queue = deque([start])
    while queue:
        s = queue.popleft()
        if s not in gt.rows:
            continue
        hist = tuple(x for x in s if x != MISSING)
        rec_of[s] = recommender(hist) if recommender is not None else None
        row = gt.adjusted_row(s, rec_of[s])
        for x in np.flatnonzero(row > 0):
            t = advance(s, int(x))
            if t not in seen:
                seen[t] = len(order)
                order.append(t)
                queue.append(t)
    n = len(order)
    P = np.zeros((n, n))
    b = np.zeros(n)
    for s, i in seen.items():
        if s not in gt.rows:
            continue
        row = gt.adjusted_row(s, rec_of[s])
        for x in np.flatnonzero(row > 0):
            b[i] += row[x] * rewards[x]
            P[i, seen[advance(s, int(x))]] += row[x]
    cont = gamma * (1.0 - gt.end_prob)
    if horizon is None:
        return float(np.linalg.solve(np.eye(n) - cont * P, b)[0])
    v = np.zeros(n)
    for _ in range(horizon):
        v = b + cont * (P @ v)
    return float(v[0])


def mdp_recommender(policy, m) -> Recommender:
    """Top-Q action for the state reached by the history."""
    from .mdp import recommend

    cache: dict[State, int | None] = {}

    def rec(history: Sequence[int]) -> int | None:
        s = state_from_history(list(history), m.k)
        if s not in cache:
            out = recommend(policy, m, s, 1)
            cache[s] = out[0] if out else None
        return cache[s]

    return rec


def ranker_recommender(predictor) -> Recommender:
    """Most probable next item under the predictor."""
    from .mc_model import rank

    cache: dict[State, int | None] = {}

    def rec(history: Sequence[int]) -> int | None:
        s = state_from_history(list(history), predictor.k)
        if s not in cache:
            out = rank(predictor, items_of(s))
            cache[s] = out[0] if out else None
        return cache[s]

    return rec


POLICY_NAMES = ("mdp", "myopic", "mc", "none")


def train_and_compare(
    gt: GroundTruth,
    policy_names: Sequence[str] = ("mdp", "myopic"),
    n_users: int = 2000,
    max_len: int = 20,
    episodes: int = 1000,
    steps: int = 20,
    seed: int = 0,
    k: int | None = None,
    alpha: float = 1.5,
    gamma: float = 0.95,
    skipping: bool = False,
    clustering: bool = False,
    tolerance: float = 1e-6,
    max_iterations: int = 100,
    unencountered: str = "reward",
    end_state: bool = False,
) -> tuple[list[PolicyResult], dict]:
    """Learn a predictor from a generated corpus, solve the MDP and compare.

    ``mdp`` is the solved policy, ``myopic`` maximizes one-step expected
    reward, ``mc`` recommends the most probable item and ``none`` never
    recommends. With ``end_state`` the MDP also learns where sessions stop.
    """
    from .mc_model import build
    from .mdp import MdpModel, estimate_end_probs, myopic_policy, solve

    unknown = set(policy_names) - set(POLICY_NAMES)
    if unknown:
        raise ValueError(f"unknown policies {sorted(unknown)}; choose from {POLICY_NAMES}")
    streams = np.random.SeedSequence(seed).spawn(2)
    corpus_seed = int(streams[0].generate_state(1)[0])
    episode_seed = int(streams[1].generate_state(1)[0])
    corpus = generate_corpus(gt, n_users, max_len, corpus_seed)
    corpus = SessionSet([(u, s) for u, s in corpus.sequences if s], gt.catalog, "train")
    predictor = build(corpus, k or gt.order, skipping=skipping, clustering=clustering)
    m = MdpModel(
        predictor,
        rewards=gt.rewards,
        alpha=alpha,
        gamma=gamma,
        end_probs=estimate_end_probs(corpus, predictor.k) if end_state else None,
        unencountered=unencountered,
    )
    recs: dict[str, Recommender | None] = {}
    info: dict = {"users": n_users, "states": m.n_states, "model": predictor.name}
    for name in policy_names:
        if name == "mdp":
            pol = solve(m, tolerance=tolerance, max_iterations=max_iterations)
            info["iterations"] = pol.rounds
            info["converged"] = pol.converged
            recs[name] = mdp_recommender(pol, m)
        elif name == "myopic":
            recs[name] = mdp_recommender(myopic_policy(m), m)
        elif name == "mc":
            recs[name] = ranker_recommender(predictor)
        else:
            recs[name] = None
    results = compare_policies(gt, recs, episodes, steps, episode_seed, gamma)
    return results, info
