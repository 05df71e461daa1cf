"""Recommendation MDP initialized from the Markov-chain predictor.

States are the order-k contexts stored in the predictor; recommending item
``a`` multiplies its selection probability by ``alpha`` (capped at 1) and
scales every other outcome by the factor that keeps the row stochastic.
Rewards are earned on entering a state and equal the profit of its last item.
"""

from __future__ import annotations

import datetime as _dt
import json
import logging
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import kernels
from .domain import (
    MISSING,
    DataError,
    State,
    advance,
    items_of,
    state_from_history,
)
from .ingestion import SessionSet
from .mc_model import MixtureModel, predict, rank

logger = logging.getLogger(__name__)

POLICY_FORMAT = "mdprec-policy"
POLICY_VERSION = 1


class UnencounteredState(KeyError):
    """No stored transition row and no online data for a state."""


class NonConvergenceWarning(RuntimeWarning):
    pass


# value assumed for a successor state with no policy entry:
# "reward" -> its immediate reward, "zero" -> nothing beyond entering it
UNENCOUNTERED_MODES = ("reward", "zero")


def boosted_row(p: np.ndarray, q: float, alpha: float) -> tuple[float, float]:
    """``(recommended probability, scale for everything else)``."""
    boost = min(alpha * q, 1.0)
    beta = (1.0 - boost) / (1.0 - q) if q < 1.0 else 0.0
    return boost, beta


def estimate_end_probs(train: SessionSet, k: int) -> dict[State, float]:
    """Fraction of visits to each order-k state that end the sequence."""
    visits: dict[State, int] = {}
    ends: dict[State, int] = {}
    for seq in train.item_sequences():
        for e in range(1, len(seq) + 1):
            s = state_from_history(seq[:e], k)
            visits[s] = visits.get(s, 0) + 1
        if seq:
            s = state_from_history(seq, k)
            ends[s] = ends.get(s, 0) + 1
    return {s: ends.get(s, 0) / n for s, n in visits.items()}


def _encode(slots: np.ndarray, base: int) -> np.ndarray:
    code = np.zeros(slots.shape[0], dtype=np.int64)
    for m in range(slots.shape[1]):
        code = code * base + (slots[:, m] + 1)
    return code


@dataclass
class MdpModel:
    """Recommendation MDP over the encountered order-k states of a predictor."""

    predictor: MixtureModel
    rewards: np.ndarray | None = None
    alpha: float = 1.5
    gamma: float = 0.95
    prior_strength: float = 10.0
    end_probs: dict[State, float] | None = None
    online_counts: dict[tuple[State, int], dict[int, float]] = field(default_factory=dict)
    unencountered: str = "reward"
    version: int = 0

    def __post_init__(self) -> None:
        if self.predictor.unordered:
            raise ValueError("the MDP needs an ordered predictor")
        if self.alpha < 1.0:
            raise ValueError("alpha must be >= 1")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must be in [0, 1)")
        if self.prior_strength < 0:
            raise ValueError("prior_strength must be >= 0")
        if self.unencountered not in UNENCOUNTERED_MODES:
            raise ValueError(f"unencountered must be one of {UNENCOUNTERED_MODES}")
        n_items = self.predictor.n_items
        if self.rewards is None:
            self.rewards = np.asarray(self.predictor.catalog.rewards, dtype=np.float64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        if self.rewards.shape != (n_items,) or not np.all(np.isfinite(self.rewards)):
            raise ValueError("rewards must be finite, one per item")
        self.k = self.predictor.k
        top = self.predictor.component(self.k)
        # padded (early) states first; sweeps run back to front
        self.states: list[State] = sorted(
            top.states, key=lambda s: (sum(x != MISSING for x in s), s)
        )
        self.index = {s: i for i, s in enumerate(self.states)}
        self._build_rows()

    @property
    def n_items(self) -> int:
        return self.predictor.n_items

    @property
    def n_states(self) -> int:
        return len(self.states)

    def end_prob(self, s: State) -> float:
        if not self.end_probs:
            return 0.0
        return float(self.end_probs.get(s, 0.0))

    def reward_of(self, s: State) -> float:
        """Profit of the last item of ``s``; 0 for the all-MISSING state."""
        x = s[-1]
        return 0.0 if x == MISSING else float(self.rewards[x])

    def base_row(self, s: State) -> np.ndarray:
        """Predictor row for ``s`` with any end-of-session mass removed."""
        p = predict(self.predictor, items_of(s))
        return p * (1.0 - self.end_prob(s))

    def _build_rows(self) -> None:
        n = self.n_states
        indptr = np.zeros(n + 1, dtype=np.int64)
        idx_parts, val_parts = [], []
        for i, s in enumerate(self.states):
            p = self.base_row(s)
            nz = np.flatnonzero(p > 0)
            idx_parts.append(nz)
            val_parts.append(p[nz])
            indptr[i + 1] = indptr[i] + nz.size
        self.indptr = indptr
        self.items = np.concatenate(idx_parts) if idx_parts else np.zeros(0, np.int64)
        self.probs = np.concatenate(val_parts) if val_parts else np.zeros(0)
        self.entry_state = np.repeat(np.arange(n), np.diff(indptr))
        self.entry_reward = self.rewards[self.items] if self.items.size else np.zeros(0)
        self.nxt = self._successor_index()
        self.lengths = np.diff(indptr)

    def _successor_index(self) -> np.ndarray:
        if self.items.size == 0:
            return np.zeros(0, dtype=np.int64)
        base = self.n_items + 1
        if base ** self.k < 2**62:
            slots = np.array(self.states, dtype=np.int64).reshape(self.n_states, self.k)
            codes = _encode(slots, base)
            sorter = np.argsort(codes)
            tail = codes[self.entry_state] % (base ** (self.k - 1))
            succ = tail * base + (self.items + 1)
            pos = np.searchsorted(codes, succ, sorter=sorter)
            pos = np.minimum(pos, len(codes) - 1)
            hit = codes[sorter[pos]] == succ
            return np.where(hit, sorter[pos], -1).astype(np.int64)
        return np.array(
            [
                self.index.get(advance(self.states[s], int(x)), -1)
                for s, x in zip(self.entry_state, self.items)
            ],
            dtype=np.int64,
        )

    def successor(self, s: State, x: int) -> int:
        return self.index.get(advance(s, x), -1)

    def tail_value(self, rewards: np.ndarray) -> np.ndarray:
        """Stand-in future value of unencountered successors with these rewards."""
        return rewards if self.unencountered == "reward" else np.zeros_like(rewards)

    def transition_row(self, s: State, recommended: int) -> np.ndarray:
        return mdp_transition_row(self, s, recommended)


def mdp_transition_row(m: MdpModel, s: State, recommended: int) -> np.ndarray:
    """Distribution of the next item given ``recommended`` was shown at ``s``.

    The vector has one entry per item, plus a trailing end-of-session entry
    when the model carries end probabilities. Online observations for
    ``(s, recommended)`` are blended in as pseudo-counts.
    """
    n = m.n_items
    width = n + 1 if m.end_probs else n
    counts = m.online_counts.get((s, recommended), {})
    n_obs = float(sum(counts.values()))
    stored = s in m.index
    if not stored and n_obs == 0:
        raise UnencounteredState(s)
    row = np.zeros(width)
    if stored:
        p = m.base_row(s)
        q = float(p[recommended])
        boost, beta = boosted_row(p, q, m.alpha)
        row[:n] = beta * p
        row[recommended] = boost
        if m.end_probs:
            row[n] = beta * m.end_prob(s)
        if n_obs == 0:
            return row
        row *= m.prior_strength
        denom = m.prior_strength + n_obs
    else:
        denom = n_obs
    for x, c in counts.items():
        row[x] += c
    return row / denom


def observe(m: MdpModel, s: State, recommended: int, chosen: int) -> MdpModel:
    """Record that ``chosen`` followed a recommendation of ``recommended`` at ``s``."""
    if not 0 <= chosen < m.n_items:
        raise ValueError(f"unknown item {chosen}")
    row = m.online_counts.setdefault((s, recommended), {})
    row[chosen] = row.get(chosen, 0.0) + 1.0
    m.version += 1
    return m


@dataclass
class Policy:
    states: list[State]
    actions: np.ndarray
    values: np.ndarray
    gamma: float
    converged: bool = True
    rounds: int = 0
    sweeps: list[int] = field(default_factory=list)
    residuals: list[float] = field(default_factory=list)
    value_trace: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.index = {s: i for i, s in enumerate(self.states)}

    def action(self, s: State) -> int:
        return int(self.actions[self.index[s]])

    def value(self, s: State) -> float:
        return float(self.values[self.index[s]])


class _Backup:
    """Vectorized one-step backups for a fixed value table."""

    def __init__(self, m: MdpModel, values: np.ndarray, gamma: float):
        self.m = m
        self.values = values
        self.gamma = gamma
        tail = m.tail_value(m.entry_reward)
        future = np.where(m.nxt >= 0, values[np.maximum(m.nxt, 0)], tail) if m.nxt.size else 0.0
        self.W = m.entry_reward + gamma * future
        self.S = np.bincount(m.entry_state, weights=m.probs * self.W, minlength=m.n_states)
        self._online = {}
        for (s, a), counts in m.online_counts.items():
            si = m.index.get(s)
            if si is not None and counts:
                self._online.setdefault(si, []).append(a)

    def successor_value(self, s: State, x: int) -> float:
        si = self.m.successor(s, x)
        r = float(self.m.rewards[x])
        if si >= 0:
            future = self.values[si]
        else:
            future = r if self.m.unencountered == "reward" else 0.0
        return r + self.gamma * future

    def entry_q(self) -> np.ndarray:
        m = self.m
        q = m.probs
        boost = np.minimum(m.alpha * q, 1.0)
        beta = np.divide(1.0 - boost, 1.0 - q, out=np.zeros_like(q), where=q < 1.0)
        return beta * self.S[m.entry_state] + (boost - beta * q) * self.W

    def _blend(self, si: int, a: int, q_init: float) -> float:
        m = self.m
        s = m.states[si]
        counts = m.online_counts.get((s, a))
        if not counts:
            return q_init
        n_obs = sum(counts.values())
        acc = sum(c * self.successor_value(s, x) for x, c in counts.items())
        return (m.prior_strength * q_init + acc) / (m.prior_strength + n_obs)

    def q_vector(self, si: int) -> np.ndarray:
        """Dense Q over all actions at state index ``si``."""
        m = self.m
        lo, hi = m.indptr[si], m.indptr[si + 1]
        out = np.full(m.n_items, self.S[si])
        q = m.probs[lo:hi]
        W = self.W[lo:hi]
        boost = np.minimum(m.alpha * q, 1.0)
        beta = np.divide(1.0 - boost, 1.0 - q, out=np.zeros_like(q), where=q < 1.0)
        out[m.items[lo:hi]] = beta * self.S[si] + (boost - beta * q) * W
        for a in self._online.get(si, ()):
            out[a] = self._blend(si, a, out[a])
        return out

    def q_of(self, actions: np.ndarray) -> np.ndarray:
        m = self.m
        mask = m.items == actions[m.entry_state]
        q = np.bincount(m.entry_state, weights=m.probs * mask, minlength=m.n_states)
        Wa = np.bincount(m.entry_state, weights=self.W * mask, minlength=m.n_states)
        boost = np.minimum(m.alpha * q, 1.0)
        beta = np.divide(1.0 - boost, 1.0 - q, out=np.zeros_like(q), where=q < 1.0)
        out = beta * self.S + (boost - beta * q) * Wa
        for si, acts in self._online.items():
            a = int(actions[si])
            if a in acts:
                out[si] = self._blend(si, a, out[si])
        return out

    def greedy(self) -> tuple[np.ndarray, np.ndarray]:
        """Greedy actions (smallest ItemId among exact ties) and their Q."""
        m = self.m
        n = m.n_states
        big = np.iinfo(np.int64).max
        starts = m.indptr[:-1]
        Qe = self.entry_q()
        best_q = np.maximum.reduceat(Qe, starts) if Qe.size else np.zeros(n)
        at_max = Qe == best_q[m.entry_state]
        best_a = np.minimum.reduceat(np.where(at_max, m.items, big), starts)
        # smallest item outside the row's support scores S (recommendation inert)
        local = np.arange(m.items.size) - starts[m.entry_state]
        gap = np.minimum.reduceat(np.where(m.items != local, local, big), starts)
        outside = np.where(gap == big, m.lengths, gap)
        has_outside = outside < m.n_items
        better = has_outside & (self.S > best_q)
        tie = has_outside & (self.S == best_q)
        actions = np.where(better, outside, best_a)
        actions = np.where(tie, np.minimum(outside, best_a), actions)
        qbest = np.where(better, self.S, best_q)
        for si in self._online:
            qv = self.q_vector(si)
            a = int(np.flatnonzero(qv == qv.max())[0])
            actions[si], qbest[si] = a, qv[a]
        return actions.astype(np.int64), qbest


def _policy_rows(m: MdpModel, actions: np.ndarray):
    """CSR rows of the transition function under ``actions``."""
    q = np.bincount(
        m.entry_state, weights=m.probs * (m.items == actions[m.entry_state]), minlength=m.n_states
    )
    boost = np.minimum(m.alpha * q, 1.0)
    beta = np.divide(1.0 - boost, 1.0 - q, out=np.zeros_like(q), where=q < 1.0)
    prob = beta[m.entry_state] * m.probs
    hit = m.items == actions[m.entry_state]
    prob[hit] = boost[m.entry_state][hit]
    overridden = {
        m.index[s]
        for (s, a), c in m.online_counts.items()
        if c and s in m.index and int(actions[m.index[s]]) == a
    }
    if not overridden:
        return m.indptr, prob, m.nxt, m.entry_reward
    indptr = [0]
    probs, nxts, rews = [], [], []
    for si in range(m.n_states):
        lo, hi = m.indptr[si], m.indptr[si + 1]
        if si in overridden:
            s = m.states[si]
            row = mdp_transition_row(m, s, int(actions[si]))[: m.n_items]
            nz = np.flatnonzero(row > 0)
            probs.append(row[nz])
            nxts.append(np.array([m.successor(s, int(x)) for x in nz], dtype=np.int64))
            rews.append(m.rewards[nz])
        else:
            probs.append(prob[lo:hi])
            nxts.append(m.nxt[lo:hi])
            rews.append(m.entry_reward[lo:hi])
        indptr.append(indptr[-1] + probs[-1].size)
    return (
        np.array(indptr, dtype=np.int64),
        np.concatenate(probs),
        np.concatenate(nxts),
        np.concatenate(rews),
    )


def solve(
    m: MdpModel,
    tolerance: float = 1e-6,
    max_iterations: int = 100,
    gamma: float | None = None,
    max_sweeps: int = 100_000,
    trace: bool = False,
) -> Policy:
    """Policy iteration over the encountered states.

    A successor outside the encountered set is valued at its immediate reward
    (``unencountered="reward"``) or at zero (``"zero"``). Evaluation runs Gauss-Seidel sweeps (back to front, warm-started)
    until the largest update is below ``tolerance``. The initial policy is
    greedy on immediate rewards; an action is replaced only by a strictly
    better one, so exact ties keep the smallest ItemId.
    """
    if tolerance <= 0:
        raise ValueError("tolerance must be positive")
    gamma = m.gamma if gamma is None else float(gamma)
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must be in [0, 1)")
    n = m.n_states
    values = np.zeros(n)
    sweep_order = np.arange(n - 1, -1, -1, dtype=np.int64)
    actions, _ = _Backup(m, values, gamma).greedy()
    sweeps, residuals, value_trace = [], [], []
    converged = False
    rounds = 0
    while rounds < max_iterations:
        rounds += 1
        indptr, prob, nxt, rew = _policy_rows(m, actions)
        # unencountered successors: fold their stand-in value into the reward
        rew = rew + gamma * np.where(nxt < 0, m.tail_value(rew), 0.0)
        used, residual = kernels.evaluate_policy(
            indptr, prob, nxt, rew, gamma, values, sweep_order, tolerance, max_sweeps
        )
        sweeps.append(used)
        residuals.append(residual)
        if trace:
            value_trace.append(values.copy())
        logger.debug("round %d: %d sweeps, residual %.3g", rounds, used, residual)
        backup = _Backup(m, values, gamma)
        greedy, qbest = backup.greedy()
        qcur = backup.q_of(actions)
        margin = 1e-12 * np.maximum(1.0, np.abs(qbest))
        switch = (greedy != actions) & (qbest > qcur + margin)
        if not switch.any():
            converged = True
            break
        actions = np.where(switch, greedy, actions)
    if not converged:
        warnings.warn(
            f"policy iteration did not stabilize in {max_iterations} rounds",
            NonConvergenceWarning,
            stacklevel=2,
        )
    return Policy(
        list(m.states),
        actions,
        values,
        gamma,
        converged=converged,
        rounds=rounds,
        sweeps=sweeps,
        residuals=residuals,
        value_trace=value_trace,
    )


def myopic_policy(m: MdpModel, tolerance: float = 1e-9) -> Policy:
    """Greedy on one-step expected reward (the zero-discount solution)."""
    return solve(m, tolerance=tolerance, gamma=0.0)


def _backup_for(policy: Policy, m: MdpModel) -> _Backup:
    key = (id(m), m.version)
    cached = policy.__dict__.get("_backup")
    if cached is not None and cached[0] == key:
        return cached[1]
    if policy.states == m.states:
        values = policy.values
    else:
        values = np.array([policy.value(t) if t in policy.index else 0.0 for t in m.states])
    backup = _Backup(m, values, policy.gamma)
    policy.__dict__["_backup"] = (key, backup)
    return backup


def q_values(policy: Policy, m: MdpModel, s: State) -> np.ndarray:
    """Q of every action at ``s`` under the policy's value table."""
    si = m.index.get(s)
    if si is None:
        raise UnencounteredState(s)
    return _backup_for(policy, m).q_vector(si)


def recommend(policy: Policy, m: MdpModel, s: State, m_top: int = 1) -> list[int]:
    """The ``m_top`` highest-Q actions at ``s``; ties go to the smaller ItemId.

    States without a policy entry fall back to the predictor's ranking.
    """
    if m_top < 1:
        raise ValueError("m_top must be >= 1")
    if s not in policy.index or s not in m.index:
        return rank(m.predictor, items_of(s))[:m_top]
    q = q_values(policy, m, s)
    ids = np.arange(q.size)
    order = ids[np.lexsort((ids, -q))].tolist()
    # the solved action leads even if a rounding-level tie sorts it lower
    head = policy.action(s)
    order.remove(head)
    return ([head] + order)[:m_top]


def explore(
    policy: Policy,
    m: MdpModel,
    s: State,
    epsilon: float = 0.0,
    temperature: float = 1.0,
    rng: np.random.Generator | int | None = None,
) -> int:
    """Boltzmann sample over actions whose Q is within ``epsilon`` of the best."""
    if epsilon < 0 or temperature <= 0:
        raise ValueError("epsilon must be >= 0 and temperature > 0")
    best = policy.action(s)
    if epsilon == 0:
        return best
    rng = np.random.default_rng(rng)
    q = q_values(policy, m, s)
    eligible = np.flatnonzero(q >= q[best] - epsilon)
    if best not in eligible:
        eligible = np.union1d(eligible, [best])
    if eligible.size == 1:
        return int(eligible[0])
    logits = (q[eligible] - q[eligible].max()) / temperature
    w = np.exp(logits)
    return int(rng.choice(eligible, p=w / w.sum()))


def policy_to_json(
    policy: Policy,
    m: MdpModel,
    top_m: int = 5,
    extra: dict | None = None,
    timestamp: bool = True,
) -> dict:
    states = []
    backup = _backup_for(policy, m)
    for si, s in enumerate(policy.states):
        q = backup.q_vector(m.index[s])
        ids = np.arange(q.size)
        order = ids[np.lexsort((ids, -q))][:top_m]
        states.append(
            {
                "slots": list(s),
                "action": int(policy.actions[si]),
                "value": float(policy.values[si]),
                "top": [[int(a), float(q[a])] for a in order],
            }
        )
    doc = {
        "format": POLICY_FORMAT,
        "version": POLICY_VERSION,
        "metadata": {
            "k": m.k,
            "alpha": m.alpha,
            "gamma": policy.gamma,
            "prior_strength": m.prior_strength,
            "unencountered": m.unencountered,
            "end_state": bool(m.end_probs),
            "converged": policy.converged,
            "iterations": policy.rounds,
            "sweeps": list(policy.sweeps),
            "residuals": list(policy.residuals),
            **(extra or {}),
        },
        "rewards": [float(r) for r in m.rewards],
        "states": states,
    }
    if m.end_probs:
        doc["end_probs"] = [[list(s), float(p)] for s, p in sorted(m.end_probs.items())]
    if timestamp:
        doc["created"] = _dt.datetime.now(_dt.timezone.utc).isoformat()
    return doc


def policy_from_json(doc: dict, predictor: MixtureModel) -> tuple[Policy, MdpModel]:
    """Rebuild the MDP around ``predictor`` and attach the stored policy."""
    if doc.get("format") != POLICY_FORMAT:
        raise DataError("not a policy file")
    meta = doc["metadata"]
    end_probs = None
    if doc.get("end_probs"):
        end_probs = {tuple(s): float(p) for s, p in doc["end_probs"]}
    m = MdpModel(
        predictor,
        rewards=np.array(doc["rewards"], dtype=np.float64),
        alpha=float(meta["alpha"]),
        gamma=float(meta["gamma"]),
        prior_strength=float(meta["prior_strength"]),
        end_probs=end_probs,
        unencountered=str(meta.get("unencountered", "reward")),
    )
    states = [tuple(row["slots"]) for row in doc["states"]]
    if set(states) != set(m.states):
        raise DataError("policy states do not match the model")
    policy = Policy(
        states,
        np.array([row["action"] for row in doc["states"]], dtype=np.int64),
        np.array([row["value"] for row in doc["states"]], dtype=np.float64),
        float(meta["gamma"]),
        converged=bool(meta.get("converged", True)),
        rounds=int(meta.get("iterations", 0)),
        sweeps=[int(x) for x in meta.get("sweeps", [])],
        residuals=[float(x) for x in meta.get("residuals", [])],
    )
    return policy, m


def save_policy(policy: Policy, m: MdpModel, path: str, **kwargs) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(policy_to_json(policy, m, **kwargs), fh)
        fh.write("\n")


def load_policy(path: str, predictor: MixtureModel) -> tuple[Policy, MdpModel]:
    with open(path, encoding="utf-8") as fh:
        return policy_from_json(json.load(fh), predictor)


def state_for(m: MdpModel, history: Sequence[int]) -> State:
    return state_from_history(list(history), m.k)
