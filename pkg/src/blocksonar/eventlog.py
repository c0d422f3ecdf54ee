"""
Append-only CSV store of inventory observations and the first-observation
index built over a closed log.

File format: header ``ts_ms,peer,kind,hash``, one event per LF-terminated
line, no quoting.
"""

from __future__ import annotations

import bisect
import errno
import logging
import os
from collections import defaultdict
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple

from .errors import IoFailure, StorageFull, UnknownHash

log = logging.getLogger(__name__)

HEADER = "ts_ms,peer,kind,hash"
KINDS = ("tx", "block")


class InvEvent(NamedTuple):
    ts_ms: int
    peer: str
    kind: str
    hash: str

    def validate(self) -> "InvEvent":
        if self.kind not in KINDS:
            raise ValueError(f"kind must be tx or block, got {self.kind!r}")
        if len(self.hash) != 64 or self.hash != self.hash.lower():
            raise ValueError(f"hash must be 64 lowercase hex chars: {self.hash!r}")
        int(self.hash, 16)
        if self.ts_ms < 0:
            raise ValueError("negative timestamp")
        if "," in self.peer or "\n" in self.peer:
            raise ValueError(f"peer contains a separator: {self.peer!r}")
        return self

    def line(self) -> str:
        return f"{self.ts_ms},{self.peer},{self.kind},{self.hash}\n"


class FirstObservation(NamedTuple):
    hash: str
    kind: str
    first_ts_ms: int
    first_peer: str


def _io_error(err: OSError) -> Exception:
    if err.errno in (errno.ENOSPC, errno.EDQUOT):
        return StorageFull(str(err))
    return IoFailure(str(err))


class EventLogWriter:
    """Single-writer appender. Events are durable once :meth:`flush` returns.

    Reopening an existing log appends to it; a torn final line left by a
    crash is cut off first.
    """

    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)
        self.count = 0
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            fresh = not self.path.exists() or self.path.stat().st_size == 0
            if not fresh:
                _drop_torn_tail(self.path)
            self._fh = open(self.path, "a", encoding="ascii", newline="\n")
            if fresh:
                self._fh.write(HEADER + "\n")
        except OSError as err:
            raise _io_error(err) from err

    def append(self, event: InvEvent) -> None:
        try:
            self._fh.write(event.line())
        except OSError as err:
            raise _io_error(err) from err
        self.count += 1

    def extend(self, events: Iterable[InvEvent]) -> None:
        for ev in events:
            self.append(ev)

    def flush(self) -> None:
        try:
            self._fh.flush()
            os.fsync(self._fh.fileno())
        except OSError as err:
            raise _io_error(err) from err

    def close(self) -> None:
        if self._fh.closed:
            return
        self.flush()
        self._fh.close()

    def __enter__(self) -> "EventLogWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def _drop_torn_tail(path: Path) -> None:
    with open(path, "rb+") as fh:
        fh.seek(0, os.SEEK_END)
        size = fh.tell()
        fh.seek(max(0, size - 4096))
        tail = fh.read()
        if tail.endswith(b"\n"):
            return
        cut = tail.rfind(b"\n")
        keep = size - len(tail) + cut + 1 if cut >= 0 else 0
        log.warning("%s: dropping %d-byte torn line", path, size - keep)
        fh.truncate(keep)


def write_events(path: str | os.PathLike, events: Iterable[InvEvent]) -> int:
    """Write a complete log in one go (overwrites)."""
    path = Path(path)
    if path.exists():
        path.unlink()
    with EventLogWriter(path) as w:
        w.extend(events)
        return w.count


def read_events(path: str | os.PathLike) -> list[InvEvent]:
    """Parse a log file. A torn final line is skipped with a warning."""
    try:
        with open(path, "r", encoding="ascii", newline="") as fh:
            text = fh.read()
    except OSError as err:
        raise _io_error(err) from err
    lines = text.split("\n")
    if not lines or lines[0].rstrip("\r") != HEADER:
        raise ValueError(f"{path}: missing header {HEADER!r}")
    if lines[-1] != "":
        log.warning("%s: ignoring torn final line %r", path, lines[-1][:80])
    events = []
    for lineno, line in enumerate(lines[1:-1], start=2):
        parts = line.split(",")
        if len(parts) != 4:
            raise ValueError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
        ts, peer, kind, h = parts
        events.append(InvEvent(int(ts), peer, kind, h))
    return events


class EventIndex:
    """Read-only view over a closed log."""

    def __init__(self, events: Iterable[InvEvent]):
        self.events: list[InvEvent] = sorted(events, key=lambda e: (e.ts_ms, e.peer, e.hash, e.kind))
        self._ts = [e.ts_ms for e in self.events]
        by_hash: dict[str, list[InvEvent]] = defaultdict(list)
        for ev in self.events:
            by_hash[ev.hash].append(ev)
        self._by_hash = dict(by_hash)
        self._first: dict[str, FirstObservation] = {}
        for h, evs in self._by_hash.items():
            # already sorted by (ts, peer), so the head wins the tie-break
            head = evs[0]
            self._first[h] = FirstObservation(h, head.kind, head.ts_ms, head.peer)

    @classmethod
    def open(cls, path: str | os.PathLike) -> "EventIndex":
        return cls(read_events(path))

    def __len__(self) -> int:
        return len(self.events)

    def hashes(self, kind: str | None = None) -> list[str]:
        return sorted(h for h, f in self._first.items() if kind is None or f.kind == kind)

    def first_observation(self, hash: str) -> FirstObservation | None:
        return self._first.get(hash)

    def first_seen(self) -> dict[str, int]:
        return {h: f.first_ts_ms for h, f in self._first.items()}

    def first_seen_by_kind(self, kind: str) -> list[int]:
        """First-observation times of every hash of ``kind``."""
        return [f.first_ts_ms for f in self._first.values() if f.kind == kind]

    def events_for(self, hash: str) -> list[InvEvent]:
        return list(self._by_hash.get(hash, ()))

    def span(self) -> tuple[int, int] | None:
        """``(min_ts, max_ts)`` or None for an empty log."""
        if not self.events:
            return None
        return self._ts[0], self._ts[-1]

    def iterate(self, t0: int | None = None, t1: int | None = None, kind: str | None = None) -> Iterator[InvEvent]:
        """Events with ``t0 <= ts < t1`` ordered by ``(ts, peer, hash)``."""
        if t0 is not None and t1 is not None and t0 > t1:
            raise ValueError("t0 > t1")
        lo = 0 if t0 is None else bisect.bisect_left(self._ts, t0)
        hi = len(self._ts) if t1 is None else bisect.bisect_left(self._ts, t1)
        for ev in self.events[lo:hi]:
            if kind is None or ev.kind == kind:
                yield ev

    def reach_count_series(self, hash: str, until_ts: int | None = None) -> list[tuple[int, int]]:
        """Cumulative count of distinct announcing peers, one step per distinct ts.

        Events later than ``until_ts`` are dropped (``until_ts`` itself is kept).
        """
        evs = self._by_hash.get(hash)
        if not evs:
            raise UnknownHash(hash)
        seen: set[str] = set()
        series: list[tuple[int, int]] = []
        for ev in evs:
            if until_ts is not None and ev.ts_ms > until_ts:
                break
            if ev.peer in seen:
                continue
            seen.add(ev.peer)
            if series and series[-1][0] == ev.ts_ms:
                series[-1] = (ev.ts_ms, len(seen))
            else:
                series.append((ev.ts_ms, len(seen)))
        return series
