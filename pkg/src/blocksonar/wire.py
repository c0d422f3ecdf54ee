"""
Minimal Bitcoin wire protocol: framing, the message subset a passive
listener needs (version/verack, getaddr/addr, inv, ping/pong) and the
connection handshake.

-------------------------------------------------------------------------------
[ 4] MAGIC                                                       char[4]
[12] COMMAND              ascii, zero padded                     char[12]
[ 4] LENGTH               <I                                     uint32_t
[ 4] CHECKSUM             sha256(sha256(payload))[:4]            char[4]
[..] PAYLOAD

    VERSION   <i version, <Q services, <q timestamp, addr_recv (26),
              addr_from (26), <Q nonce, var_str user_agent, <i height,
              <? relay
    ADDR      varint count (<= 1000), count x [<I time, <Q services,
              16s ip, >H port]
    INV       varint count (<= 50000), count x [<I type, 32s hash]
-------------------------------------------------------------------------------
"""

from __future__ import annotations

import asyncio
import base64
import hashlib
import io
import ipaddress
import logging
import struct
import time
from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import BinaryIO, NamedTuple, Union

from .errors import (
    BadChecksum,
    BadCommand,
    BadMagic,
    CommandTooLong,
    HandshakeTimeout,
    NonCanonical,
    OversizedPayload,
    ProtocolViolation,
    TooManyAddresses,
    TooManyVectors,
    Truncated,
)

log = logging.getLogger(__name__)

MAINNET_MAGIC = b"\xf9\xbe\xb4\xd9"
# Deliberately not any public network's magic.
SIM_MAGIC = b"\xb5\x0a\x4a\x51"

PROTOCOL_VERSION = 70012
USER_AGENT = "/blocksonar:0.1.0/"
HEADER_LEN = 24
MAX_PAYLOAD = 32 * 1024 * 1024
MAX_INV = 50_000
MAX_ADDR = 1000
MAX_USER_AGENT = 256
HANDSHAKE_TIMEOUT = 10.0

NODE_NETWORK = 1

IPV4_PREFIX = b"\x00" * 10 + b"\xff" * 2
ONION_PREFIX = b"\xfd\x87\xd8\x7e\xeb\x43"

ByteSource = Union[bytes, bytearray, memoryview, BinaryIO]


def sha256d(data: bytes) -> bytes:
    return hashlib.sha256(hashlib.sha256(data).digest()).digest()


def checksum(payload: bytes) -> bytes:
    return sha256d(payload)[:4]


def encode_varint(n: int) -> bytes:
    """Compact-size encoding, always the minimal form."""
    if n < 0 or n > 0xFFFFFFFFFFFFFFFF:
        raise ValueError(f"varint out of range: {n}")
    if n < 0xFD:
        return bytes((n,))
    if n <= 0xFFFF:
        return b"\xfd" + struct.pack("<H", n)
    if n <= 0xFFFFFFFF:
        return b"\xfe" + struct.pack("<I", n)
    return b"\xff" + struct.pack("<Q", n)


_VARINT_FORMS = {0xFD: ("<H", 2, 0xFD), 0xFE: ("<I", 4, 0x10000), 0xFF: ("<Q", 8, 0x100000000)}


def decode_varint(data: bytes, offset: int = 0) -> tuple[int, int]:
    """Return ``(value, consumed)`` for the varint at ``data[offset:]``."""
    if offset >= len(data):
        raise Truncated("varint: no bytes")
    first = data[offset]
    if first < 0xFD:
        return first, 1
    fmt, size, minimum = _VARINT_FORMS[first]
    end = offset + 1 + size
    if end > len(data):
        raise Truncated(f"varint: need {size} more bytes")
    (value,) = struct.unpack(fmt, data[offset + 1 : end])
    if value < minimum:
        raise NonCanonical(f"varint {value} encoded in {size + 1} bytes")
    return value, size + 1


def _encode_var_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return encode_varint(len(raw)) + raw


class _Reader:
    """Bounds-checked cursor over a payload."""

    def __init__(self, data: bytes):
        self.data = bytes(data)
        self.pos = 0

    def take(self, n: int) -> bytes:
        end = self.pos + n
        if end > len(self.data):
            raise Truncated(f"need {n} bytes at offset {self.pos}, have {len(self.data) - self.pos}")
        chunk = self.data[self.pos : end]
        self.pos = end
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def varint(self) -> int:
        value, used = decode_varint(self.data, self.pos)
        self.pos += used
        return value

    def remaining(self) -> int:
        return len(self.data) - self.pos


# -- framing ------------------------------------------------------------------


@dataclass(frozen=True)
class MessageHeader:
    magic: bytes
    command: str
    payload_length: int
    checksum: bytes

    def encode(self) -> bytes:
        return self.magic + _pad_command(self.command) + struct.pack("<I", self.payload_length) + self.checksum

    @classmethod
    def decode(cls, raw: bytes) -> "MessageHeader":
        if len(raw) < HEADER_LEN:
            raise Truncated(f"header: {len(raw)} of {HEADER_LEN} bytes")
        magic, cmd, length, chk = struct.unpack("<4s12sI4s", raw[:HEADER_LEN])
        return cls(magic, _parse_command(cmd), length, chk)


def _pad_command(command: str) -> bytes:
    raw = command.encode("ascii")
    if len(raw) > 12:
        raise CommandTooLong(command)
    return raw.ljust(12, b"\x00")


def _parse_command(raw: bytes) -> str:
    name, _, rest = raw.partition(b"\x00")
    if rest.strip(b"\x00"):
        raise BadCommand(f"non-zero bytes after terminator: {raw!r}")
    if not all(0x20 < b < 0x7F for b in name):
        raise BadCommand(f"non-printable command: {raw!r}")
    return name.decode("ascii")


def encode_message(magic: bytes, command: str, payload: bytes = b"") -> bytes:
    payload = bytes(payload)
    header = MessageHeader(magic, command, len(payload), checksum(payload))
    return header.encode() + payload


def _check_header(header: MessageHeader, magic: bytes | None, max_payload: int) -> None:
    if magic is not None and header.magic != magic:
        raise BadMagic(f"got {header.magic.hex()}, want {magic.hex()}")
    if header.payload_length > max_payload:
        raise OversizedPayload(f"{header.command}: {header.payload_length} > {max_payload}")


def decode_message(
    stream: ByteSource, magic: bytes | None = MAINNET_MAGIC, max_payload: int = MAX_PAYLOAD
) -> tuple[str, bytes]:
    """Read one frame and return ``(command, payload)``.

    ``stream`` may be a bytes-like object (must start at a frame boundary)
    or a binary file object, which is advanced by exactly one frame.
    Pass ``magic=None`` to accept any network.
    """
    if isinstance(stream, (bytes, bytearray, memoryview)):
        stream = io.BytesIO(bytes(stream))
    header = MessageHeader.decode(_read_exact(stream, HEADER_LEN))
    _check_header(header, magic, max_payload)
    payload = _read_exact(stream, header.payload_length)
    if checksum(payload) != header.checksum:
        raise BadChecksum(header.command)
    return header.command, payload


def _read_exact(stream: BinaryIO, n: int) -> bytes:
    data = stream.read(n)
    if data is None or len(data) < n:
        raise Truncated(f"stream ended after {0 if data is None else len(data)} of {n} bytes")
    return data


async def read_message(
    reader: asyncio.StreamReader, magic: bytes | None = MAINNET_MAGIC, max_payload: int = MAX_PAYLOAD
) -> tuple[str, bytes]:
    try:
        raw = await reader.readexactly(HEADER_LEN)
        header = MessageHeader.decode(raw)
        _check_header(header, magic, max_payload)
        payload = await reader.readexactly(header.payload_length)
    except asyncio.IncompleteReadError as err:
        raise Truncated(f"connection closed after {len(err.partial)} bytes") from None
    if checksum(payload) != header.checksum:
        raise BadChecksum(header.command)
    return header.command, payload


# -- addresses ----------------------------------------------------------------


@dataclass(frozen=True)
class NetAddress:
    services: int
    ip: bytes  # 16 bytes, IPv4-mapped for v4, onion prefix for tor
    port: int

    def __post_init__(self):
        if len(self.ip) != 16:
            raise ValueError(f"ip must be 16 bytes, got {len(self.ip)}")

    @classmethod
    def from_host(cls, host: str, port: int, services: int = NODE_NETWORK) -> "NetAddress":
        if host.endswith(".onion"):
            tail = base64.b32decode(host[: -len(".onion")].upper())
            if len(tail) != 10:
                raise ValueError(f"only 16-char onion names fit in 16 bytes: {host}")
            return cls(services, ONION_PREFIX + tail, port)
        addr = ipaddress.ip_address(host.strip("[]"))
        if addr.version == 4:
            return cls(services, IPV4_PREFIX + addr.packed, port)
        return cls(services, addr.packed, port)

    @property
    def host(self) -> str:
        if self.ip.startswith(IPV4_PREFIX):
            return str(ipaddress.IPv4Address(self.ip[12:]))
        if self.ip.startswith(ONION_PREFIX):
            return base64.b32encode(self.ip[6:]).decode("ascii").lower() + ".onion"
        return str(ipaddress.IPv6Address(self.ip))

    def __str__(self) -> str:
        host = self.host
        if ":" in host:
            host = f"[{host}]"
        return f"{host}:{self.port}"

    def encode(self) -> bytes:
        return struct.pack("<Q", self.services) + self.ip + struct.pack(">H", self.port)

    @classmethod
    def read(cls, r: _Reader) -> "NetAddress":
        (services,) = r.unpack("<Q")
        ip = r.take(16)
        (port,) = r.unpack(">H")
        return cls(services, ip, port)


def parse_endpoint(text: str, default_port: int = 8333) -> tuple[str, int]:
    """Split ``host:port`` / ``[v6]:port`` / bare host."""
    if text.startswith("["):
        host, _, rest = text[1:].partition("]")
        port = int(rest[1:]) if rest.startswith(":") else default_port
        return host, port
    if text.count(":") == 1:
        host, port = text.split(":")
        return host, int(port)
    return text, default_port


def encode_addr(entries: list[tuple[int, NetAddress]]) -> bytes:
    if len(entries) > MAX_ADDR:
        raise TooManyAddresses(f"{len(entries)} > {MAX_ADDR}")
    parts = [encode_varint(len(entries))]
    for last_seen, addr in entries:
        parts.append(struct.pack("<I", last_seen))
        parts.append(addr.encode())
    return b"".join(parts)


def decode_addr(payload: bytes) -> list[tuple[int, NetAddress]]:
    r = _Reader(payload)
    count = r.varint()
    if count > MAX_ADDR:
        raise TooManyAddresses(f"{count} > {MAX_ADDR}")
    entries = []
    for _ in range(count):
        (last_seen,) = r.unpack("<I")
        entries.append((last_seen, NetAddress.read(r)))
    return entries


# -- inventory ----------------------------------------------------------------


class InvKind(IntEnum):
    TX = 1
    BLOCK = 2


class InvVector(NamedTuple):
    kind: int
    hash: bytes  # 32 bytes, wire order

    @property
    def known(self) -> bool:
        return self.kind in (InvKind.TX, InvKind.BLOCK)

    @property
    def hash_hex(self) -> str:
        """Hash in the conventional display order (byte-reversed)."""
        return self.hash[::-1].hex()

    @classmethod
    def from_hex(cls, kind: int, display_hex: str) -> "InvVector":
        return cls(int(kind), bytes.fromhex(display_hex)[::-1])


def encode_inv(vectors: list[InvVector]) -> bytes:
    if len(vectors) > MAX_INV:
        raise TooManyVectors(f"{len(vectors)} > {MAX_INV}")
    parts = [encode_varint(len(vectors))]
    for v in vectors:
        if len(v.hash) != 32:
            raise ValueError("inventory hash must be 32 bytes")
        parts.append(struct.pack("<I", v.kind) + v.hash)
    return b"".join(parts)


def decode_inv(payload: bytes) -> list[InvVector]:
    r = _Reader(payload)
    count = r.varint()
    if count > MAX_INV:
        raise TooManyVectors(f"{count} > {MAX_INV}")
    out = []
    for _ in range(count):
        (kind,) = r.unpack("<I")
        vec = InvVector(kind, r.take(32))
        if not vec.known:
            log.debug("unknown inventory kind %#x", kind)
        out.append(vec)
    return out


# -- version ------------------------------------------------------------------

_NULL_ADDR = NetAddress(0, IPV4_PREFIX + b"\x00" * 4, 0)


@dataclass(frozen=True)
class VersionInfo:
    protocol_version: int = PROTOCOL_VERSION
    services: int = 0
    timestamp: int = 0
    user_agent: str = USER_AGENT
    start_height: int = 0
    nonce: int = 0
    relay: bool = True
    addr_recv: NetAddress = field(default=_NULL_ADDR)
    addr_from: NetAddress = field(default=_NULL_ADDR)

    def encode(self) -> bytes:
        if self.protocol_version <= 0:
            raise ValueError("protocol_version must be positive")
        if len(self.user_agent.encode("utf-8")) > MAX_USER_AGENT:
            raise ValueError("user_agent longer than 256 bytes")
        return b"".join(
            (
                struct.pack("<iQq", self.protocol_version, self.services, self.timestamp),
                self.addr_recv.encode(),
                self.addr_from.encode(),
                struct.pack("<Q", self.nonce),
                _encode_var_str(self.user_agent),
                struct.pack("<i?", self.start_height, self.relay),
            )
        )

    @classmethod
    def decode(cls, payload: bytes) -> "VersionInfo":
        r = _Reader(payload)
        version, services, timestamp = r.unpack("<iQq")
        if version <= 0:
            raise ProtocolViolation(f"version {version}")
        addr_recv = NetAddress.read(r)
        addr_from = NetAddress.read(r)
        (nonce,) = r.unpack("<Q")
        ua_len = r.varint()
        if ua_len > MAX_USER_AGENT:
            raise ProtocolViolation(f"user_agent length {ua_len}")
        user_agent = r.take(ua_len).decode("utf-8", errors="replace")
        (height,) = r.unpack("<i")
        # relay byte is absent in pre-70001 peers
        relay = bool(r.take(1)[0]) if r.remaining() else True
        return cls(version, services, timestamp, user_agent, height, nonce, relay, addr_recv, addr_from)


def ping_payload(nonce: int) -> bytes:
    return struct.pack("<Q", nonce)


# -- handshake ----------------------------------------------------------------


async def handshake(
    reader: asyncio.StreamReader,
    writer: asyncio.StreamWriter,
    self_info: VersionInfo,
    magic: bytes = MAINNET_MAGIC,
    timeout: float = HANDSHAKE_TIMEOUT,
    max_payload: int = MAX_PAYLOAD,
) -> VersionInfo:
    """Outbound version/verack exchange. Returns the peer's VersionInfo."""

    async def exchange() -> VersionInfo:
        info = self_info
        if not info.timestamp:
            info = replace(info, timestamp=int(time.time()))
        writer.write(encode_message(magic, "version", info.encode()))
        await writer.drain()
        peer: VersionInfo | None = None
        while True:
            command, payload = await read_message(reader, magic, max_payload)
            if command == "version":
                if peer is not None:
                    raise ProtocolViolation("duplicate version")
                try:
                    peer = VersionInfo.decode(payload)
                except Truncated as err:
                    raise ProtocolViolation(f"malformed version: {err}") from None
                writer.write(encode_message(magic, "verack"))
                await writer.drain()
            elif command == "verack":
                if peer is None:
                    raise ProtocolViolation("verack before version")
                return peer
            else:
                log.debug("ignoring %r during handshake", command)

    try:
        return await asyncio.wait_for(exchange(), timeout)
    except asyncio.TimeoutError:
        raise HandshakeTimeout(f"no handshake within {timeout} s") from None


async def accept_handshake(
    reader: asyncio.StreamReader,
    writer: asyncio.StreamWriter,
    self_info: VersionInfo,
    magic: bytes = MAINNET_MAGIC,
    timeout: float = HANDSHAKE_TIMEOUT,
) -> VersionInfo:
    """Inbound side: wait for version, answer version+verack, wait for verack."""

    async def exchange() -> VersionInfo:
        command, payload = await read_message(reader, magic)
        if command != "version":
            raise ProtocolViolation(f"expected version, got {command!r}")
        peer = VersionInfo.decode(payload)
        writer.write(encode_message(magic, "version", self_info.encode()))
        writer.write(encode_message(magic, "verack"))
        await writer.drain()
        while True:
            command, _ = await read_message(reader, magic)
            if command == "verack":
                return peer

    try:
        return await asyncio.wait_for(exchange(), timeout)
    except asyncio.TimeoutError:
        raise HandshakeTimeout(f"no handshake within {timeout} s") from None
