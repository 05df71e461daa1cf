"""Offline scoring of ranked next-item lists: hit rate at m and half-life decay."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .ingestion import SessionSet

Ranker = Callable[[Sequence[int]], Sequence[int]]

DEFAULT_M = (1, 3, 5, 10)
DEFAULT_HALF_LIFE = 5.0


@dataclass(frozen=True)
class TestCase:
    __test__ = False  # not a pytest class

    context: tuple[int, ...]
    observed: int


def expand_cases(test: SessionSet | Iterable[Sequence[int]], k: int) -> list[TestCase]:
    """One case per transition: the last ``min(p, k)`` items and the item after."""
    seqs = test.item_sequences() if isinstance(test, SessionSet) else test
    cases = []
    for seq in seqs:
        for p in range(1, len(seq)):
            cases.append(TestCase(tuple(seq[max(0, p - k) : p]), int(seq[p])))
    return cases


def positions(cases: Sequence[TestCase], ranker: Ranker) -> np.ndarray:
    """1-based position of each observed item in its ranked list, 0 if absent.

    Rankings are computed once per distinct context.
    """
    cache: dict[tuple[int, ...], dict[int, int]] = {}
    out = np.zeros(len(cases), dtype=np.int64)
    for i, case in enumerate(cases):
        where = cache.get(case.context)
        if where is None:
            where = {int(item): pos for pos, item in enumerate(ranker(case.context), start=1)}
            cache[case.context] = where
        out[i] = where.get(case.observed, 0)
    return out


def decay_weights(pos: np.ndarray, half_life: float) -> np.ndarray:
    """Probability of the user seeing each position; 0 where absent."""
    if half_life <= 1:
        raise ValueError("half_life must be > 1")
    pos = np.asarray(pos)
    w = np.exp2(-(np.maximum(pos, 1) - 1) / (half_life - 1))
    return np.where(pos > 0, w, 0.0)


def _require_cases(cases) -> None:
    if len(cases) == 0:
        raise ValueError("no test cases to score")


def rc_from_positions(pos: np.ndarray, m: int) -> float:
    if m < 1:
        raise ValueError("m must be >= 1")
    _require_cases(pos)
    return 100.0 * float(np.mean((pos > 0) & (pos <= m)))


def ed_from_positions(pos: np.ndarray, half_life: float = DEFAULT_HALF_LIFE) -> float:
    _require_cases(pos)
    return 100.0 * float(np.mean(decay_weights(pos, half_life)))


def recommendation_score(cases: Sequence[TestCase], ranker: Ranker, m: int) -> float:
    """Percentage of cases whose observed item is in the top ``m``."""
    _require_cases(cases)
    return rc_from_positions(positions(cases, ranker), m)


def exponential_decay_score(
    cases: Sequence[TestCase], ranker: Ranker, half_life: float = DEFAULT_HALF_LIFE
) -> float:
    """Mean view probability ``2 ** (-(pos - 1) / (half_life - 1))``, times 100."""
    _require_cases(cases)
    return ed_from_positions(positions(cases, ranker), half_life)


@dataclass
class ScoreReport:
    rc_at_m: dict[int, float]
    ed_score: float | None
    case_count: int
    half_life: float
    model: str = ""
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        doc = {
            "model": self.model,
            "cases": self.case_count,
            "half_life": self.half_life,
            "rc": {str(m): v for m, v in sorted(self.rc_at_m.items())},
            "ed": self.ed_score,
        }
        doc.update(self.extra)
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_table(self) -> str:
        rows = [("metric", "value")]
        for m, v in sorted(self.rc_at_m.items()):
            rows.append((f"RC@{m}", f"{v:.3f}"))
        if self.ed_score is not None:
            rows.append((f"ED(h={self.half_life:g})", f"{self.ed_score:.3f}"))
        rows.append(("cases", str(self.case_count)))
        width = max(len(r[0]) for r in rows)
        lines = [f"{name:<{width}}  {val:>10}" for name, val in rows]
        lines.insert(1, "-" * (width + 12))
        if self.model:
            lines.insert(0, self.model)
        return "\n".join(lines)


def evaluate(
    ranker: Ranker,
    test: SessionSet,
    k: int,
    m_values: Sequence[int] = DEFAULT_M,
    half_life: float = DEFAULT_HALF_LIFE,
    metrics: Sequence[str] = ("rc", "ed"),
    model_name: str = "",
) -> ScoreReport:
    if len(test) == 0:
        raise ValueError("empty test set")
    cases = expand_cases(test, k)
    _require_cases(cases)
    pos = positions(cases, ranker)
    rc = {int(m): rc_from_positions(pos, m) for m in m_values} if "rc" in metrics else {}
    ed = ed_from_positions(pos, half_life) if "ed" in metrics else None
    return ScoreReport(rc, ed, len(cases), float(half_life), model_name)
