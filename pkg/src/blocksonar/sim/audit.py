"""Cross-check a monitor log against the simulator's delivery schedule."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from ..eventlog import InvEvent

# Everything a passive listener may send. Anything else (getdata, inv, tx, ...)
# means the monitor took part in relay.
MONITOR_ALLOWED = frozenset({"version", "verack", "getaddr", "ping", "pong"})


@dataclass
class AuditReport:
    checked: int = 0
    violations: list[str] = field(default_factory=list)

    @property
    def clean(self) -> bool:
        return not self.violations


Schedule = Mapping[tuple[str, str], tuple[str, int]]


def load_audit(path: str | os.PathLike) -> tuple[dict, list[str]]:
    """Read ``audit.jsonl`` back into ``(schedule, monitor_sent)``."""
    schedule: dict = {}
    sent: list[str] = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            if rec["event"] == "deliver":
                schedule[(rec["peer"], rec["hash"])] = (rec["kind"], rec["t"])
            elif rec["event"] == "monitor_sent":
                sent = list(rec["commands"])
    return schedule, sent


def audit_monitor(
    events: Iterable[InvEvent],
    schedule: Schedule,
    monitor_sent: Iterable[str] = (),
    tolerance_ms: int = 0,
    peer_map: Mapping[str, str] | None = None,
) -> AuditReport:
    """List every monitor event with no matching scheduled delivery, and every
    non-passive command the monitor sent.

    ``peer_map`` renames log peers (e.g. loopback ``127.0.0.1:port``) to
    simulator peer names before matching.
    """
    report = AuditReport()
    for ev in events:
        report.checked += 1
        peer = peer_map.get(ev.peer, ev.peer) if peer_map else ev.peer
        want = schedule.get((peer, ev.hash))
        if want is None:
            report.violations.append(f"unscheduled {ev.kind} {ev.hash} from {peer} at {ev.ts_ms}")
            continue
        kind, ts = want
        if kind != ev.kind:
            report.violations.append(f"{ev.hash} from {peer}: kind {ev.kind}, scheduled {kind}")
        elif abs(ev.ts_ms - ts) > tolerance_ms:
            report.violations.append(f"{ev.hash} from {peer}: at {ev.ts_ms}, scheduled {ts}")
    for cmd in monitor_sent:
        if cmd not in MONITOR_ALLOWED:
            report.violations.append(f"monitor sent {cmd!r}")
    return report
