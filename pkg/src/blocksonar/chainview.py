"""
Ground-truth ledger: blocks, main-chain heights, transaction inclusion.

Ledger file is JSON Lines. A line carrying ``hash`` is a block::

    {"hash", "height", "prev", "time_ms", "pow_valid", "main_chain",
     "txs": [{"txid", "value_sats", "fee_sats", "locktime_set", "is_coinbase"}, ...]}

A line carrying ``txid`` at top level is a transaction that no block
contains; it adds ``"valid": bool`` so unconfirmed-but-valid and invalid
transactions can be told apart.
"""

from __future__ import annotations

import bisect
import json
import os
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, NamedTuple

from .errors import InconsistentChain, OutOfRange, ParseError


@dataclass(frozen=True)
class TxRecord:
    txid: str
    value_sats: int
    fee_sats: int
    locktime_set: bool = False
    is_coinbase: bool = False
    valid: bool = True
    included_in: str | None = None  # main-chain block hash, if any

    def to_json(self) -> dict:
        return {
            "txid": self.txid,
            "value_sats": self.value_sats,
            "fee_sats": self.fee_sats,
            "locktime_set": self.locktime_set,
            "is_coinbase": self.is_coinbase,
        }


@dataclass(frozen=True)
class BlockRecord:
    hash: str
    height: int
    prev: str
    time_ms: int
    pow_valid: bool
    main_chain: bool
    txids: tuple[str, ...] = ()


class Inclusion(NamedTuple):
    block_hash: str
    height: int
    time_ms: int


_BLOCK_FIELDS = {
    "hash": str,
    "height": int,
    "prev": str,
    "time_ms": int,
    "pow_valid": bool,
    "main_chain": bool,
    "txs": list,
}
_TX_FIELDS = {"txid": str, "value_sats": int, "fee_sats": int, "locktime_set": bool, "is_coinbase": bool}


def _check_fields(obj: Mapping, spec: Mapping[str, type], where: str) -> None:
    for name, typ in spec.items():
        if name not in obj:
            raise ParseError(f"{where}: missing field {name!r}")
        value = obj[name]
        ok = isinstance(value, typ) and not (typ is int and isinstance(value, bool))
        if not ok:
            raise ParseError(f"{where}: {name} should be {typ.__name__}, got {value!r}")
    for name in ("height", "value_sats", "fee_sats"):
        if name in spec and obj[name] < 0:
            raise ParseError(f"{where}: negative {name}")


def _check_hash(value: str, where: str) -> None:
    if len(value) != 64:
        raise ParseError(f"{where}: hash must be 64 hex chars: {value!r}")
    try:
        int(value, 16)
    except ValueError:
        raise ParseError(f"{where}: not hex: {value!r}") from None


@dataclass(frozen=True)
class ChainView:
    blocks: dict[str, BlockRecord]
    main_by_height: dict[int, str]
    txs: dict[str, TxRecord]
    block_seen_ms: dict[str, int] = field(default_factory=dict)

    # -- construction ----------------------------------------------------------

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ChainView":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                lines = fh.read().splitlines()
        except OSError as err:
            raise ParseError(f"{path}: {err}") from err
        records = []
        for lineno, line in enumerate(lines, start=1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as err:
                raise ParseError(f"{path}:{lineno}: {err}") from None
        return cls.from_records(records, source=str(path))

    @classmethod
    def from_records(cls, records: Iterable[Mapping], source: str = "<ledger>") -> "ChainView":
        blocks: dict[str, BlockRecord] = {}
        block_txs: dict[str, list[Mapping]] = {}
        loose: list[Mapping] = []
        for n, rec in enumerate(records, start=1):
            where = f"{source}: record {n}"
            if not isinstance(rec, Mapping):
                raise ParseError(f"{where}: not an object")
            if "hash" in rec:
                _check_fields(rec, _BLOCK_FIELDS, where)
                _check_hash(rec["hash"], where)
                for tx in rec["txs"]:
                    if not isinstance(tx, Mapping):
                        raise ParseError(f"{where}: tx entry is not an object")
                    _check_fields(tx, _TX_FIELDS, where)
                    _check_hash(tx["txid"], where)
                if rec["hash"] in blocks:
                    raise InconsistentChain(f"{where}: duplicate block {rec['hash']}")
                blocks[rec["hash"]] = BlockRecord(
                    rec["hash"],
                    rec["height"],
                    rec["prev"],
                    rec["time_ms"],
                    rec["pow_valid"],
                    rec["main_chain"],
                    tuple(tx["txid"] for tx in rec["txs"]),
                )
                block_txs[rec["hash"]] = list(rec["txs"])
            elif "txid" in rec:
                _check_fields(rec, {**_TX_FIELDS, "valid": bool}, where)
                _check_hash(rec["txid"], where)
                loose.append(rec)
            else:
                raise ParseError(f"{where}: neither a block nor a transaction")

        main_by_height: dict[int, str] = {}
        for b in blocks.values():
            if not b.main_chain:
                continue
            if not b.pow_valid:
                raise InconsistentChain(f"main-chain block {b.hash} has invalid proof of work")
            if b.height in main_by_height:
                raise InconsistentChain(f"two main-chain blocks at height {b.height}")
            main_by_height[b.height] = b.hash
        if main_by_height:
            lo, hi = min(main_by_height), max(main_by_height)
            missing = [h for h in range(lo, hi + 1) if h not in main_by_height]
            if missing:
                raise InconsistentChain(f"main chain has height gap at {missing[0]}")
            for h in range(lo + 1, hi + 1):
                b = blocks[main_by_height[h]]
                if b.prev != main_by_height[h - 1]:
                    raise InconsistentChain(f"block {b.hash} at height {h} does not link to height {h - 1}")

        txs: dict[str, TxRecord] = {}
        for bhash, entries in block_txs.items():
            block = blocks[bhash]
            for tx in entries:
                rec = TxRecord(
                    tx["txid"], tx["value_sats"], tx["fee_sats"], tx["locktime_set"], tx["is_coinbase"]
                )
                if rec.is_coinbase and rec.fee_sats:
                    raise InconsistentChain(f"coinbase {rec.txid} carries a fee")
                prior = txs.get(rec.txid)
                if block.main_chain:
                    if prior is not None and prior.included_in is not None:
                        raise InconsistentChain(f"tx {rec.txid} included twice on the main chain")
                    txs[rec.txid] = replace(rec, included_in=bhash)
                elif prior is None:
                    txs[rec.txid] = rec
        for tx in loose:
            if tx["txid"] in txs:
                raise InconsistentChain(f"tx {tx['txid']} listed loose and inside a block")
            txs[tx["txid"]] = TxRecord(
                tx["txid"], tx["value_sats"], tx["fee_sats"], tx["locktime_set"], tx["is_coinbase"], tx["valid"]
            )
        return cls(blocks, main_by_height, txs)

    def with_observations(self, first_seen: Mapping[str, int]) -> "ChainView":
        """Copy whose block times prefer first network observation.

        ``first_seen`` maps hash -> first observation ms (extra hashes are ignored).
        """
        seen = {h: ts for h, ts in first_seen.items() if h in self.blocks}
        return replace(self, block_seen_ms=seen)

    # -- queries ---------------------------------------------------------------

    @property
    def tip_height(self) -> int:
        if not self.main_by_height:
            raise OutOfRange("empty main chain")
        return max(self.main_by_height)

    def main_chain(self) -> list[BlockRecord]:
        return [self.blocks[self.main_by_height[h]] for h in sorted(self.main_by_height)]

    def block_at(self, height: int) -> BlockRecord | None:
        h = self.main_by_height.get(height)
        return None if h is None else self.blocks[h]

    def seen_ms(self, block_hash: str) -> int:
        """First observation if one is attached, else the block's own timestamp."""
        seen = self.block_seen_ms.get(block_hash)
        return self.blocks[block_hash].time_ms if seen is None else seen

    def inclusion(self, txid: str) -> Inclusion | None:
        tx = self.txs.get(txid)
        if tx is None or tx.included_in is None:
            return None
        b = self.blocks[tx.included_in]
        return Inclusion(b.hash, b.height, b.time_ms)

    def tip_height_at(self, ts_ms: int) -> int:
        """Highest main-chain height whose block was seen at or before ``ts_ms``."""
        times, heights = self._tip_table()
        i = bisect.bisect_right(times, ts_ms)
        if i == 0:
            raise OutOfRange(f"{ts_ms} precedes every main-chain block")
        return heights[i - 1]

    def _tip_table(self) -> tuple[list[int], list[int]]:
        cache = self.__dict__.get("_tip_cache")
        if cache is None:
            pairs = sorted((self.seen_ms(b), h) for h, b in self.main_by_height.items())
            times, heights, best = [], [], -1
            for ts, h in pairs:
                best = max(best, h)
                times.append(ts)
                heights.append(best)
            cache = (times, heights)
            object.__setattr__(self, "_tip_cache", cache)
        return cache


def block_line(block: BlockRecord, txs: Iterable[TxRecord]) -> str:
    obj = {
        "hash": block.hash,
        "height": block.height,
        "prev": block.prev,
        "time_ms": block.time_ms,
        "pow_valid": block.pow_valid,
        "main_chain": block.main_chain,
        "txs": [t.to_json() for t in txs],
    }
    return json.dumps(obj, separators=(",", ":"))


def loose_tx_line(tx: TxRecord) -> str:
    return json.dumps({**tx.to_json(), "valid": tx.valid}, separators=(",", ":"))
