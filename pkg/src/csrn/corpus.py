"""Click-log ingestion, cleaning, and time-based history/train/valid/test splits.

Event-log format: UTF-8, one event per line,
``user<TAB>item<TAB>timestamp[<TAB>dwell]``; lines starting with ``#`` ignored.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ParseError(ValueError):
    """A malformed event-log line; carries the 1-based line number."""

    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class EmptyCorpusError(ValueError):
    """No events survived filtering."""


@dataclass(frozen=True)
class ClickEvent:
    user_id: str
    item_id: str
    timestamp: int
    dwell: int | None = None


@dataclass(frozen=True)
class SplitConfig:
    history_end: int
    train_end: int
    valid_end: int
    test_end: int
    min_dwell: int = 0
    top_k_users: int = 0  # 0 keeps everyone

    def __post_init__(self):
        if not (self.history_end < self.train_end < self.valid_end < self.test_end):
            raise ValueError("split boundaries must be strictly increasing")
        if self.min_dwell < 0:
            raise ValueError("min_dwell must be >= 0")


class EventStream:
    """Per-user time-ordered click events with dense user/item indices.

    Immutable after construction; window views produced by `split` share the
    parent's id tables, so item indices stay comparable across windows.
    """

    def __init__(self, user_ids, item_ids, user, item, ts, dwell):
        self.user_ids = user_ids
        self.item_ids = item_ids
        self.user_index = {u: i for i, u in enumerate(user_ids)}
        self.item_index = {m: j for j, m in enumerate(item_ids)}
        self.user = np.asarray(user, dtype=np.int64)
        self.item = np.asarray(item, dtype=np.int64)
        self.ts = np.asarray(ts, dtype=np.int64)
        self.dwell = np.asarray(dwell, dtype=np.int64)  # -1 when absent
        # stable sort by (user, ts); ties keep input order
        order = np.lexsort((np.arange(len(self.user)), self.ts, self.user))
        self.user = self.user[order]
        self.item = self.item[order]
        self.ts = self.ts[order]
        self.dwell = self.dwell[order]
        self.offsets = np.zeros(len(user_ids) + 1, dtype=np.int64)
        np.add.at(self.offsets, self.user + 1, 1)
        self.offsets = np.cumsum(self.offsets)

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    def __len__(self) -> int:
        return len(self.user)

    def user_events(self, u: int):
        """(item indices, timestamps) of user u, ascending in time."""
        lo, hi = self.offsets[u], self.offsets[u + 1]
        return self.item[lo:hi], self.ts[lo:hi]

    def _view(self, mask: np.ndarray) -> "EventStream":
        view = EventStream.__new__(EventStream)
        view.user_ids = self.user_ids
        view.item_ids = self.item_ids
        view.user_index = self.user_index
        view.item_index = self.item_index
        view.user = self.user[mask]
        view.item = self.item[mask]
        view.ts = self.ts[mask]
        view.dwell = self.dwell[mask]
        view.offsets = np.zeros(len(self.user_ids) + 1, dtype=np.int64)
        np.add.at(view.offsets, view.user + 1, 1)
        view.offsets = np.cumsum(view.offsets)
        return view


def parse_line(line: str, lineno: int):
    parts = line.rstrip("\n").split("\t")
    if len(parts) not in (3, 4):
        raise ParseError(lineno, f"expected 3 or 4 tab-separated fields, got {len(parts)}")
    user_id, item_id, ts_s = parts[0], parts[1], parts[2]
    if not user_id or not item_id:
        raise ParseError(lineno, "empty user or item id")
    try:
        ts = int(ts_s)
    except ValueError:
        raise ParseError(lineno, f"bad timestamp {ts_s!r}") from None
    if ts < 0:
        raise ParseError(lineno, "negative timestamp")
    dwell = None
    if len(parts) == 4:
        try:
            dwell = int(parts[3])
        except ValueError:
            raise ParseError(lineno, f"bad dwell {parts[3]!r}") from None
        if dwell < 0:
            raise ParseError(lineno, "negative dwell")
    return ClickEvent(user_id, item_id, ts, dwell)


def ingest(path, min_dwell: int = 0, top_k_users: int = 0) -> EventStream:
    """Read an event log, drop short-dwell clicks, keep the most active users.

    Users are ranked by total event count after the dwell filter; ties broken
    by first appearance in the file.  Events whose line has no dwell column
    skip the dwell filter.  Dense indices are assigned in first-appearance
    order over the retained events.
    """
    events: list[ClickEvent] = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip() or line.startswith("#"):
                continue
            ev = parse_line(line, lineno)
            if ev.dwell is not None and ev.dwell < min_dwell:
                continue
            events.append(ev)
    if not events:
        raise EmptyCorpusError(f"no events left after filtering {path}")

    counts: dict[str, int] = {}
    first_seen: dict[str, int] = {}
    for pos, ev in enumerate(events):
        counts[ev.user_id] = counts.get(ev.user_id, 0) + 1
        first_seen.setdefault(ev.user_id, pos)
    keep = sorted(counts, key=lambda u: (-counts[u], first_seen[u]))
    if top_k_users > 0:
        keep = keep[:top_k_users]
    kept = set(keep)
    events = [ev for ev in events if ev.user_id in kept]
    if not events:
        raise EmptyCorpusError("no events left after user filtering")

    user_ids, item_ids = [], []
    uidx: dict[str, int] = {}
    iidx: dict[str, int] = {}
    user, item, ts, dwell = [], [], [], []
    for ev in events:
        if ev.user_id not in uidx:
            uidx[ev.user_id] = len(user_ids)
            user_ids.append(ev.user_id)
        if ev.item_id not in iidx:
            iidx[ev.item_id] = len(item_ids)
            item_ids.append(ev.item_id)
        user.append(uidx[ev.user_id])
        item.append(iidx[ev.item_id])
        ts.append(ev.timestamp)
        dwell.append(-1 if ev.dwell is None else ev.dwell)
    return EventStream(user_ids, item_ids, user, item, ts, dwell)


def split(stream: EventStream, cfg: SplitConfig):
    """Partition by half-open windows [start, end); views share index maps.

    history = [0, history_end), train = [history_end, train_end),
    valid = [train_end, valid_end), test = [valid_end, test_end).
    Events at or past test_end are dropped from all views.
    """
    t = stream.ts
    history = stream._view(t < cfg.history_end)
    train = stream._view((t >= cfg.history_end) & (t < cfg.train_end))
    valid = stream._view((t >= cfg.train_end) & (t < cfg.valid_end))
    test = stream._view((t >= cfg.valid_end) & (t < cfg.test_end))
    return history, train, valid, test


def window(stream: EventStream, start: int, end: int) -> EventStream:
    """View of events with start <= timestamp < end, sharing index maps."""
    return stream._view((stream.ts >= start) & (stream.ts < end))


def interaction_matrix(stream: EventStream):
    """Binary user-by-item interaction matrix of a stream window."""
    from . import numerics

    row_cols = []
    for u in range(stream.n_users):
        items, _ = stream.user_events(u)
        row_cols.append(np.unique(items))
    return numerics.SparseBinaryMatrix(stream.n_users, stream.n_items, row_cols)


def write_events(stream: EventStream, path, header: str | None = None) -> None:
    """Serialize back to the tab-separated event-log format."""
    with open(path, "w", encoding="utf-8") as f:
        if header:
            for line in header.splitlines():
                f.write(f"# {line}\n")
        for u, j, t, d in zip(stream.user, stream.item, stream.ts, stream.dwell):
            row = f"{stream.user_ids[u]}\t{stream.item_ids[j]}\t{t}"
            if d >= 0:
                row += f"\t{d}"
            f.write(row + "\n")
