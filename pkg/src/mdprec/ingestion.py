"""Event-log parsing, sessionization, frequency filtering and the user split."""

from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .domain import DataError, ItemCatalog

DEFAULT_GAP_SECONDS = 2 * 3600


@dataclass(frozen=True)
class RawEvent:
    user: str
    timestamp: int
    item: str


@dataclass
class SessionSet:
    """Per-user item sequences over a shared catalog."""

    sequences: list[tuple[str, list[int]]]
    catalog: ItemCatalog
    split_tag: str = "all"
    stats: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.sequences)

    @property
    def users(self) -> list[str]:
        return sorted({user for user, _ in self.sequences})

    def item_sequences(self) -> list[list[int]]:
        return [seq for _, seq in self.sequences]


def _sniff_format(path: str) -> str:
    return "jsonl" if path.endswith((".jsonl", ".ndjson", ".json")) else "csv"


def _parse_ts(raw, where: str) -> int:
    if isinstance(raw, bool):
        raise DataError(f"{where}: timestamp must be an integer")
    if isinstance(raw, int):
        return raw
    if isinstance(raw, str):
        try:
            return int(raw.strip())
        except ValueError:
            pass
    raise DataError(f"{where}: timestamp {raw!r} is not an integer")


def _read_csv(path: str) -> list[RawEvent]:
    events = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return []
        header = [h.strip() for h in header]
        try:
            cols = [header.index(name) for name in ("user", "ts", "item")]
        except ValueError:
            raise DataError(f"{path}:1: expected header 'user,ts,item', got {header}") from None
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            where = f"{path}:{lineno}"
            if len(row) < len(header):
                raise DataError(f"{where}: expected {len(header)} fields, got {len(row)}")
            user, ts, item = (row[c].strip() for c in cols)
            if not user or not item:
                raise DataError(f"{where}: empty user or item field")
            events.append(RawEvent(user, _parse_ts(ts, where), item))
    return events


def _read_jsonl(path: str) -> list[RawEvent]:
    events = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            where = f"{path}:{lineno}"
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{where}: invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise DataError(f"{where}: expected a JSON object")
            user, item = rec.get("user"), rec.get("item")
            if not isinstance(user, str) or not user:
                raise DataError(f"{where}: missing string field 'user'")
            if not isinstance(item, str) or not item:
                raise DataError(f"{where}: missing string field 'item'")
            if "ts" not in rec:
                raise DataError(f"{where}: missing field 'ts'")
            ts = rec["ts"]
            if not isinstance(ts, int) or isinstance(ts, bool):
                raise DataError(f"{where}: field 'ts' must be an integer")
            events.append(RawEvent(user, ts, item))
    return events


def load_events(path: str, fmt: str | None = None) -> list[RawEvent]:
    """Parse a CSV or JSONL event log.

    Events come back grouped by user (users in order of first appearance),
    each group sorted by timestamp. The sort is stable, so ties keep file
    order.
    """
    fmt = fmt or _sniff_format(path)
    if fmt == "csv":
        events = _read_csv(path)
    elif fmt == "jsonl":
        events = _read_jsonl(path)
    else:
        raise ValueError(f"unknown format {fmt!r}")
    first_seen: dict[str, int] = {}
    for ev in events:
        first_seen.setdefault(ev.user, len(first_seen))
    return sorted(events, key=lambda ev: (first_seen[ev.user], ev.timestamp))


def _by_user(events: Iterable[RawEvent]) -> dict[str, list[RawEvent]]:
    groups: dict[str, list[RawEvent]] = {}
    for ev in events:
        groups.setdefault(ev.user, []).append(ev)
    for group in groups.values():
        group.sort(key=lambda ev: ev.timestamp)
    return groups


def sessionize(
    events: Iterable[RawEvent], gap: int = DEFAULT_GAP_SECONDS
) -> list[tuple[str, list[str]]]:
    """Cut each user's stream wherever consecutive events are ``>= gap`` apart."""
    if gap <= 0:
        raise ValueError("session gap must be positive")
    out = []
    for user, group in _by_user(events).items():
        current = [group[0].item]
        for prev, ev in zip(group, group[1:]):
            if ev.timestamp - prev.timestamp >= gap:
                out.append((user, current))
                current = []
            current.append(ev.item)
        out.append((user, current))
    return out


def group_sequences(events: Iterable[RawEvent]) -> list[tuple[str, list[str]]]:
    """One sequence per user, no sessionization (transaction data)."""
    return [(user, [ev.item for ev in group]) for user, group in _by_user(events).items()]


def filter_sequences(
    sequences: Sequence[tuple[str, Sequence[str]]],
    min_item_count: int = 100,
    min_seq_len: int = 2,
    catalog: ItemCatalog | None = None,
) -> SessionSet:
    """Drop rare items and short sequences until neither rule fires.

    Surviving item keys are interned in sorted order, so ItemIds follow the
    lexicographic order of their external keys.
    """
    if min_item_count < 1:
        raise ValueError("min_item_count must be >= 1")
    if min_seq_len < 2:
        raise ValueError("min_seq_len must be >= 2")
    current = [(user, list(seq)) for user, seq in sequences]
    while True:
        counts = Counter(item for _, seq in current for item in seq)
        rare = {item for item, n in counts.items() if n < min_item_count}
        nxt = []
        for user, seq in current:
            if rare:
                seq = [item for item in seq if item not in rare]
            if len(seq) >= min_seq_len:
                nxt.append((user, seq))
        if not rare and len(nxt) == len(current):
            break
        current = nxt
    if not current:
        raise DataError("empty corpus: every sequence was filtered out")
    if catalog is None:
        catalog = ItemCatalog()
    for key in sorted({item for _, seq in current for item in seq}):
        catalog.intern(key)
    interned = [(user, [catalog.lookup(item) for item in seq]) for user, seq in current]
    return SessionSet(interned, catalog)


def split(
    sessions: SessionSet, train_fraction: float = 0.9, seed: int = 0
) -> tuple[SessionSet, SessionSet]:
    """Random by-user split; ``round(fraction * n_users)`` users (ties up) train."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must be in (0, 1)")
    users = sessions.users
    n_train = int(np.floor(train_fraction * len(users) + 0.5))
    order = np.random.default_rng(seed).permutation(len(users))
    train_users = {users[i] for i in order[:n_train]}
    train = [(u, s) for u, s in sessions.sequences if u in train_users]
    test = [(u, s) for u, s in sessions.sequences if u not in train_users]
    return (
        SessionSet(train, sessions.catalog, "train"),
        SessionSet(test, sessions.catalog, "test"),
    )


SESSIONS_FORMAT = "mdprec-sessions"


def sessions_to_json(train: SessionSet, test: SessionSet, extra: dict | None = None) -> dict:
    if train.catalog is not test.catalog:
        raise ValueError("train and test must share a catalog")

    def rows(ss: SessionSet):
        return [{"user": user, "items": list(seq)} for user, seq in ss.sequences]

    doc = {
        "format": SESSIONS_FORMAT,
        "version": 1,
        "items": list(train.catalog.keys),
        "train": rows(train),
        "test": rows(test),
    }
    if extra:
        doc.update(extra)
    return doc


def sessions_from_json(doc: dict) -> tuple[SessionSet, SessionSet]:
    if doc.get("format") != SESSIONS_FORMAT:
        raise DataError("not a sessions file")
    catalog = ItemCatalog(list(doc["items"]))
    n = len(catalog)

    def parse(rows, tag):
        out = []
        for row in rows:
            seq = [int(x) for x in row["items"]]
            if any(not 0 <= x < n for x in seq):
                raise DataError(f"sessions file: item id out of range for user {row['user']!r}")
            out.append((str(row["user"]), seq))
        return SessionSet(out, catalog, tag)

    return parse(doc["train"], "train"), parse(doc["test"], "test")
