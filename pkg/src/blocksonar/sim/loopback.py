"""
Replay a simulated run over real loopback sockets.

Each simulated peer becomes an asyncio server speaking the wire protocol. The
real crawler connects to one seed, discovers the rest through getaddr, and
once every session is up the peers replay their scheduled inv announcements
in (scaled) real time. Peers record every command the monitor sends, which
is the passivity audit.
"""

from __future__ import annotations

import asyncio
import logging
from dataclasses import dataclass

from ..crawler import Crawler, CrawlerConfig
from ..errors import WireError
from ..eventlog import InvEvent
from ..wire import (
    SIM_MAGIC,
    InvKind,
    InvVector,
    NetAddress,
    VersionInfo,
    accept_handshake,
    encode_addr,
    encode_inv,
    encode_message,
    read_message,
)
from .audit import AuditReport, audit_monitor
from .engine import SimResult

log = logging.getLogger(__name__)


class SimPeerServer:
    """One simulated node listening on 127.0.0.1."""

    def __init__(self, name: str, schedule=(), magic: bytes = SIM_MAGIC, start_height: int = 0):
        self.name = name
        self.schedule = sorted(schedule)  # (ts_ms, kind, hash)
        self.magic = magic
        self.start_height = start_height
        self.addr_book: list[NetAddress] = []
        self.received: list[str] = []
        self.sessions = 0
        self.drop_after_handshake = 0  # close this many sessions right after the handshake
        self.server: asyncio.base_events.Server | None = None
        self.port = 0
        self.go = asyncio.Event()
        self.t_zero = 0.0
        self.start_ms = 0
        self.speed = 1.0
        self.done = asyncio.Event()
        self._writers: list[asyncio.StreamWriter] = []

    @property
    def address(self) -> NetAddress:
        return NetAddress.from_host("127.0.0.1", self.port)

    async def start(self) -> "SimPeerServer":
        self.server = await asyncio.start_server(self._handle, "127.0.0.1", 0)
        self.port = self.server.sockets[0].getsockname()[1]
        return self

    async def close(self) -> None:
        if self.server is not None:
            self.server.close()
            for w in self._writers:
                w.close()
            await self.server.wait_closed()

    async def _handle(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        self._writers.append(writer)
        replay = None
        try:
            info = VersionInfo(start_height=self.start_height, user_agent=f"/simpeer:{self.name}/")
            await accept_handshake(reader, writer, info, self.magic, timeout=5.0)
            self.received += ["version", "verack"]
            self.sessions += 1
            if self.drop_after_handshake > 0:
                self.drop_after_handshake -= 1
                return
            replay = asyncio.create_task(self._replay(writer))
            while True:
                command, payload = await read_message(reader, self.magic)
                self.received.append(command)
                if command == "getaddr":
                    entries = [(0, a) for a in self.addr_book[:1000]]
                    writer.write(encode_message(self.magic, "addr", encode_addr(entries)))
                elif command == "ping":
                    writer.write(encode_message(self.magic, "pong", payload))
                await writer.drain()
        except (OSError, WireError, asyncio.IncompleteReadError):
            pass
        finally:
            if replay is not None:
                replay.cancel()
            writer.close()

    async def _replay(self, writer: asyncio.StreamWriter) -> None:
        await self.go.wait()
        loop = asyncio.get_running_loop()
        i = 0
        items = self.schedule
        while i < len(items):
            ts = items[i][0]
            batch = []
            while i < len(items) and items[i][0] == ts:
                _, kind, h = items[i]
                batch.append(InvVector.from_hex(InvKind.TX if kind == "tx" else InvKind.BLOCK, h))
                i += 1
            delay = self.t_zero + (ts - self.start_ms) / 1000.0 / self.speed - loop.time()
            if delay > 0:
                await asyncio.sleep(delay)
            writer.write(encode_message(self.magic, "inv", encode_inv(batch)))
            await writer.drain()
        self.done.set()


@dataclass
class LoopbackRun:
    events: list[InvEvent]  # peers renamed to simulator names
    raw_events: list[InvEvent]
    peer_map: dict[str, str]
    monitor_sent: list[str]
    report: AuditReport
    max_skew_ms: int = 0
    established: int = 0


async def replay_async(
    result: SimResult, speed: float | None = None, tolerance_ms: int = 100, warmup_timeout_s: float = 15.0
) -> LoopbackRun:
    speed = speed or result.config.loopback_speed
    loop = asyncio.get_running_loop()
    schedules: dict[str, list] = {p: [] for p in result.peers}
    for e in result.events:
        schedules[e.peer].append((e.ts_ms, e.kind, e.hash))
    servers = [await SimPeerServer(p, schedules[p]).start() for p in result.peers]
    book = [s.address for s in servers]
    for s in servers:
        s.addr_book = [a for a in book if a != s.address]
    peer_map = {str(s.address): s.name for s in servers}

    t_zero = loop.time() + 3600.0  # replaced once every session is up

    def clock() -> int:
        return result.start_ms + round((loop.time() - t_zero) * 1000.0 * speed)

    raw: list[InvEvent] = []
    crawler = Crawler(
        CrawlerConfig(seeds=[str(servers[0].address)], magic=SIM_MAGIC, reconnect_backoff_base_ms=50), raw.extend,
        clock,
    )
    await crawler.start()
    try:
        deadline = loop.time() + warmup_timeout_s
        while len(crawler.established()) < len(servers):
            if loop.time() > deadline:
                raise TimeoutError(f"only {len(crawler.established())}/{len(servers)} sessions after warm-up")
            await asyncio.sleep(0.01)
        t_zero = loop.time() + 0.05
        for s in servers:
            s.t_zero, s.start_ms, s.speed = t_zero, result.start_ms, speed
            s.go.set()
        await asyncio.wait_for(
            asyncio.gather(*(s.done.wait() for s in servers if s.schedule)),
            timeout=(result.end_ms - result.start_ms) / 1000.0 / speed + 30.0,
        )
        await asyncio.sleep(0.2)
        established = len(crawler.established())
    finally:
        await crawler.stop()
        for s in servers:
            await s.close()
    sent = sorted({c for s in servers for c in s.received})
    renamed = [InvEvent(e.ts_ms, peer_map.get(e.peer, e.peer), e.kind, e.hash) for e in raw]
    schedule = result.deliveries()
    report = audit_monitor(renamed, schedule, sent, tolerance_ms=tolerance_ms)
    skew = max((abs(e.ts_ms - schedule[(e.peer, e.hash)][1]) for e in renamed if (e.peer, e.hash) in schedule),
               default=0)
    return LoopbackRun(renamed, raw, peer_map, sent, report, skew, established)


def replay(result: SimResult, speed: float | None = None, tolerance_ms: int = 100) -> LoopbackRun:
    """Blocking wrapper around :func:`replay_async`."""
    return asyncio.run(replay_async(result, speed, tolerance_ms))
