"""
Passive network monitor.

Discovers peers through getaddr/addr, keeps one connection per address, and
turns every inv vector it receives into an :class:`InvEvent`. It never asks
for data (no getdata) and never relays anything.
"""

from __future__ import annotations

import asyncio
import logging
import random
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable

from .errors import NoSeeds, WireError
from .eventlog import InvEvent
from .wire import (
    MAINNET_MAGIC,
    InvKind,
    InvVector,
    NetAddress,
    VersionInfo,
    decode_addr,
    decode_inv,
    encode_message,
    handshake,
    parse_endpoint,
    read_message,
)

log = logging.getLogger(__name__)


class PeerState(str, Enum):
    NEW = "NEW"
    CONNECTING = "CONNECTING"
    ESTABLISHED = "ESTABLISHED"
    FAILED = "FAILED"
    BANNED = "BANNED"


@dataclass
class PeerEntry:
    address: NetAddress
    state: PeerState = PeerState.NEW
    last_attempt: int | None = None  # ms, crawler clock
    consecutive_failures: int = 0
    advertised_version: VersionInfo | None = None
    attempts: int = 0
    next_attempt: float = 0.0  # event-loop time

    @property
    def key(self) -> str:
        return str(self.address)


@dataclass
class CrawlerConfig:
    seeds: list[str] = field(default_factory=list)
    max_connections: int = 10_000
    handshake_timeout_ms: int = 10_000
    connect_timeout_ms: int = 5_000
    reconnect_backoff_base_ms: int = 1_000
    reconnect_backoff_cap_ms: int = 300_000
    getaddr_interval_ms: int = 600_000
    ban_after_failures: int = 20
    magic: bytes = MAINNET_MAGIC
    listen_address: str | None = None  # our own address, never dialled
    tick_ms: int = 20

    def __post_init__(self):
        if self.max_connections < 1:
            raise ValueError("max_connections must be >= 1")


def backoff_ms(failures: int, base_ms: int = 1_000, cap_ms: int = 300_000) -> int:
    """Delay before the next attempt after ``failures`` consecutive failures."""
    if failures <= 0:
        return 0
    return min(cap_ms, base_ms * 2 ** min(failures - 1, 62))


def wall_clock_ms() -> int:
    return time.time_ns() // 1_000_000


def _to_netaddr(text: str) -> NetAddress:
    host, port = parse_endpoint(text)
    return NetAddress.from_host(host, port)


EventSink = Callable[[list[InvEvent]], None]


class Crawler:
    def __init__(self, config: CrawlerConfig, sink: EventSink, clock: Callable[[], int] = wall_clock_ms):
        self.config = config
        self.sink = sink
        self.clock = clock
        self.directory: dict[str, PeerEntry] = {}
        self._self_key = str(_to_netaddr(config.listen_address)) if config.listen_address else None
        self._tasks: dict[str, asyncio.Task] = {}
        self._writers: dict[str, asyncio.StreamWriter] = {}
        self._scheduler: asyncio.Task | None = None
        self._rng = random.Random()
        self.events_seen = 0

    # -- directory ---------------------------------------------------------------

    def add(self, address: NetAddress) -> bool:
        key = str(address)
        if key in self.directory or key == self._self_key:
            return False
        self.directory[key] = PeerEntry(address)
        return True

    def on_addr(self, source: str, entries: Iterable[tuple[int, NetAddress]]) -> int:
        added = sum(1 for _, addr in entries if self.add(addr))
        if added:
            log.debug("%s: %d new addresses", source, added)
        return added

    def on_inv(self, source: str, vectors: Iterable[InvVector], now: int) -> list[InvEvent]:
        entry = self.directory.get(source)
        if entry is None or entry.state is not PeerState.ESTABLISHED:
            return []
        out = []
        for v in vectors:
            if not v.known:
                continue
            kind = "tx" if v.kind == InvKind.TX else "block"
            out.append(InvEvent(now, source, kind, v.hash_hex))
        return out

    def on_disconnect(self, source: str) -> None:
        entry = self.directory[source]
        # reconnect right away; backoff only kicks in on failed attempts
        entry.state = PeerState.NEW
        entry.next_attempt = 0.0

    def on_failure(self, source: str, loop_time: float) -> None:
        entry = self.directory[source]
        entry.consecutive_failures += 1
        if entry.consecutive_failures >= self.config.ban_after_failures:
            entry.state = PeerState.BANNED
            return
        entry.state = PeerState.FAILED
        delay = backoff_ms(
            entry.consecutive_failures, self.config.reconnect_backoff_base_ms, self.config.reconnect_backoff_cap_ms
        )
        entry.next_attempt = loop_time + delay / 1000.0

    def established(self) -> list[str]:
        return sorted(k for k, e in self.directory.items() if e.state is PeerState.ESTABLISHED)

    def states(self) -> dict[str, PeerState]:
        return {k: e.state for k, e in self.directory.items()}

    # -- lifecycle ----------------------------------------------------------------

    async def start(self) -> "Crawler":
        if not self.config.seeds:
            raise NoSeeds("no seed addresses configured")
        for seed in self.config.seeds:
            self.add(_to_netaddr(seed))
        self._scheduler = asyncio.create_task(self._schedule())
        return self

    async def stop(self) -> None:
        if self._scheduler:
            self._scheduler.cancel()
        tasks = list(self._tasks.values())
        for t in tasks:
            t.cancel()
        await asyncio.gather(*tasks, *(t for t in [self._scheduler] if t), return_exceptions=True)
        self._tasks.clear()

    async def _schedule(self) -> None:
        loop = asyncio.get_running_loop()
        while True:
            now = loop.time()
            live = len(self._tasks)
            for key, entry in list(self.directory.items()):
                if live >= self.config.max_connections:
                    break
                if entry.state in (PeerState.NEW, PeerState.FAILED) and entry.next_attempt <= now:
                    if key in self._tasks:
                        continue
                    entry.state = PeerState.CONNECTING
                    self._tasks[key] = asyncio.create_task(self._session(entry))
                    live += 1
            await asyncio.sleep(self.config.tick_ms / 1000.0)

    def _self_version(self) -> VersionInfo:
        return VersionInfo(nonce=self._rng.getrandbits(64), relay=True)

    async def _session(self, entry: PeerEntry) -> None:
        key = entry.key
        cfg = self.config
        loop = asyncio.get_running_loop()
        entry.attempts += 1
        entry.last_attempt = self.clock()
        writer = None
        established = False
        try:
            try:
                reader, writer = await asyncio.wait_for(
                    asyncio.open_connection(entry.address.host, entry.address.port), cfg.connect_timeout_ms / 1000.0
                )
                peer = await handshake(
                    reader, writer, self._self_version(), cfg.magic, cfg.handshake_timeout_ms / 1000.0
                )
            except (OSError, WireError, asyncio.TimeoutError) as err:
                log.debug("%s: connect failed: %s", key, err)
                self.on_failure(key, loop.time())
                return
            entry.state = PeerState.ESTABLISHED
            entry.consecutive_failures = 0
            entry.advertised_version = peer
            established = True
            self._writers[key] = writer
            poller = asyncio.create_task(self._getaddr_loop(writer))
            try:
                await self._listen(key, reader, writer)
            finally:
                poller.cancel()
        except (OSError, WireError) as err:
            log.debug("%s: session ended: %s", key, err)
        finally:
            self._writers.pop(key, None)
            self._tasks.pop(key, None)
            if writer is not None:
                writer.close()
            if established and entry.state is PeerState.ESTABLISHED:
                self.on_disconnect(key)

    async def _getaddr_loop(self, writer: asyncio.StreamWriter) -> None:
        while True:
            writer.write(encode_message(self.config.magic, "getaddr"))
            await writer.drain()
            await asyncio.sleep(self.config.getaddr_interval_ms / 1000.0)

    async def _listen(self, key: str, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        magic = self.config.magic
        while True:
            command, payload = await read_message(reader, magic)
            if command == "inv":
                now = self.clock()
                events = self.on_inv(key, decode_inv(payload), now)
                if events:
                    self.events_seen += len(events)
                    self.sink(events)
            elif command == "addr":
                self.on_addr(key, decode_addr(payload))
            elif command == "ping":
                writer.write(encode_message(magic, "pong", payload))
                await writer.drain()


async def bootstrap(config: CrawlerConfig, sink: EventSink, clock: Callable[[], int] = wall_clock_ms) -> Crawler:
    """Start a crawler on the running loop and return its handle."""
    return await Crawler(config, sink, clock).start()
