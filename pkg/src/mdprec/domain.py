"""Core vocabulary: item interning, k-slot states and the item catalog."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

logger = logging.getLogger(__name__)

#: Reserved slot value for "no item yet". Never a valid ItemId.
MISSING = -1

MAX_ORDER = 5

State = tuple[int, ...]


class DataError(ValueError):
    """Input data could not be parsed or is unusable."""


@dataclass
class ItemCatalog:
    """Dense interning of external item keys plus a per-item reward.

    Rewards default to 1.0 for every item until :meth:`load_profits` or
    :meth:`set_reward` says otherwise.
    """

    keys: list[str] = field(default_factory=list)
    rewards: list[float] = field(default_factory=list)
    default_reward: float = 1.0

    def __post_init__(self) -> None:
        self._index = {key: i for i, key in enumerate(self.keys)}
        if len(self._index) != len(self.keys):
            raise DataError("duplicate item keys in catalog")
        if len(self.rewards) < len(self.keys):
            self.rewards = list(self.rewards) + [self.default_reward] * (
                len(self.keys) - len(self.rewards)
            )

    def __len__(self) -> int:
        return len(self.keys)

    def __contains__(self, key: str) -> bool:
        return key in self._index

    def intern(self, external_key: str) -> int:
        if not external_key:
            raise DataError("item key must be non-empty")
        idx = self._index.get(external_key)
        if idx is None:
            idx = len(self.keys)
            self.keys.append(external_key)
            self.rewards.append(self.default_reward)
            self._index[external_key] = idx
        return idx

    def lookup(self, external_key: str) -> int | None:
        return self._index.get(external_key)

    def key_of(self, item: int) -> str:
        return self.keys[item]

    def reward(self, item: int) -> float:
        return self.rewards[item]

    def set_reward(self, item: int, value: float) -> None:
        value = float(value)
        if not math.isfinite(value):
            raise DataError(f"reward for {self.keys[item]!r} is not finite")
        self.rewards[item] = value

    def load_profits(self, path: str) -> int:
        """Read an ``item,reward`` CSV; returns the number of rewards applied.

        Rows naming items outside the catalog are ignored.
        """
        applied = 0
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or not {"item", "reward"} <= set(reader.fieldnames):
                raise DataError(f"{path}: expected header 'item,reward'")
            for lineno, row in enumerate(reader, start=2):
                key = (row.get("item") or "").strip()
                raw = row.get("reward")
                try:
                    value = float(raw)
                except (TypeError, ValueError):
                    raise DataError(f"{path}:{lineno}: bad reward {raw!r}") from None
                idx = self._index.get(key)
                if idx is None:
                    logger.warning("%s:%d: unknown item %r ignored", path, lineno, key)
                    continue
                try:
                    self.set_reward(idx, value)
                except DataError as exc:
                    raise DataError(f"{path}:{lineno}: {exc}") from None
                applied += 1
        return applied


def state_from_history(history: Sequence[int], k: int) -> State:
    """Right-align the last ``k`` items of ``history``, padding with MISSING."""
    if k < 1:
        raise ValueError("order must be >= 1")
    tail = tuple(history[-k:]) if history else ()
    return (MISSING,) * (k - len(tail)) + tail


def advance(s: State, x: int) -> State:
    if x == MISSING:
        raise ValueError("cannot advance with MISSING")
    return s[1:] + (x,)


def items_of(s: State) -> tuple[int, ...]:
    """Non-MISSING slots of ``s`` in order."""
    return tuple(x for x in s if x != MISSING)


def unorder(s: State) -> tuple[int, ...]:
    """Canonical bag (sorted tuple) of the non-MISSING slots."""
    return tuple(sorted(items_of(s)))


def unordered_key(s: State) -> State:
    """The bag of ``s`` laid out as a padded state of the same order.

    Used as the row key of unordered models so that similarity and the
    position index keep working on fixed-width tuples.
    """
    bag = unorder(s)
    return (MISSING,) * (len(s) - len(bag)) + bag


def last_item(s: State) -> int:
    return s[-1]


def is_initial(s: State) -> bool:
    return all(x == MISSING for x in s)


def check_order(k: int) -> int:
    if not 1 <= k <= MAX_ORDER:
        raise ValueError(f"order k must be in 1..{MAX_ORDER}, got {k}")
    return k


def intern_all(catalog: ItemCatalog, keys: Iterable[str]) -> list[int]:
    return [catalog.intern(key) for key in keys]


def intern(external_key: str, catalog: ItemCatalog) -> int:
    return catalog.intern(external_key)
