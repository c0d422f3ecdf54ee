"""
Block and transaction taxonomy over a closed event log and a chain view.

Blocks: MDLB (mined during listening), EB (echo), FB (fork), IB (invalid).
Transactions: BT (seen before its block), ET (echo), IT (invalid),
UNCONFIRMED (valid, not included by the analysis horizon).
"""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable

from .chainview import ChainView
from .errors import UnknownHash, UnknownToChain
from .eventlog import EventIndex, FirstObservation

log = logging.getLogger(__name__)


class BlockClass(str, Enum):
    MDLB = "MDLB"
    EB = "EB"
    FB = "FB"
    IB = "IB"


class TxClass(str, Enum):
    BT = "BT"
    ET = "ET"
    IT = "IT"
    UNCONFIRMED = "UNCONFIRMED"


UNKNOWN_TO_CHAIN = "UNKNOWN_TO_CHAIN"


@dataclass(frozen=True)
class ListeningWindow:
    start_ms: int
    end_ms: int

    def __post_init__(self):
        if not self.start_ms < self.end_ms:
            raise ValueError(f"empty listening window [{self.start_ms}, {self.end_ms})")

    def __contains__(self, ts_ms: int) -> bool:
        return self.start_ms <= ts_ms < self.end_ms

    @classmethod
    def covering(cls, index: EventIndex) -> "ListeningWindow":
        span = index.span()
        if span is None:
            return cls(0, 1)
        return cls(span[0], span[1] + 1)


class Classifier:
    """Shared precomputation for classifying many hashes against one log."""

    def __init__(self, chain: ChainView, index: EventIndex, window: ListeningWindow, horizon_ms: int | None = None):
        self.index = index
        self.window = window
        self.horizon_ms = horizon_ms
        self.chain = chain.with_observations(index.first_seen())
        # earliest observation of any main-chain block above each height
        observed = sorted(
            (b.height, self.chain.block_seen_ms[b.hash])
            for b in self.chain.main_chain()
            if b.hash in self.chain.block_seen_ms
        )
        self._next_seen: dict[int, float] = {}
        best = math.inf
        heights = sorted(self.chain.main_by_height)
        obs_by_height = dict(observed)
        for h in reversed(heights):
            self._next_seen[h] = best
            if h in obs_by_height:
                best = min(best, obs_by_height[h])

    def _first(self, hash: str) -> FirstObservation:
        first = self.index.first_observation(hash)
        if first is None:
            raise UnknownHash(hash)
        return first

    def block(self, hash: str) -> BlockClass:
        first = self._first(hash)
        b = self.chain.blocks.get(hash)
        if b is None:
            raise UnknownToChain(hash)
        if not b.pow_valid:
            return BlockClass.IB
        if not b.main_chain:
            return BlockClass.FB
        if first.first_ts_ms in self.window and first.first_ts_ms < self._next_seen[b.height]:
            return BlockClass.MDLB
        return BlockClass.EB

    def tx(self, txid: str) -> TxClass:
        first = self._first(txid)
        rec = self.chain.txs.get(txid)
        if rec is None or not rec.valid:
            return TxClass.IT
        if rec.included_in is None:
            return TxClass.UNCONFIRMED
        block_seen = self.chain.seen_ms(rec.included_in)
        if self.horizon_ms is not None and block_seen > self.horizon_ms:
            return TxClass.UNCONFIRMED
        return TxClass.ET if first.first_ts_ms >= block_seen else TxClass.BT


def mining_interval(chain: ChainView, block_hash: str) -> tuple[float, int]:
    """``[seen(parent), seen(block))`` for a main-chain block."""
    b = chain.blocks[block_hash]
    parent = chain.block_at(b.height - 1)
    start = -math.inf if parent is None else chain.seen_ms(parent.hash)
    return start, chain.seen_ms(block_hash)


def classify_block(hash: str, chain: ChainView, index: EventIndex, window: ListeningWindow) -> BlockClass:
    return Classifier(chain, index, window).block(hash)


def classify_tx(
    txid: str, chain: ChainView, index: EventIndex, window: ListeningWindow, horizon_ms: int | None = None
) -> TxClass:
    return Classifier(chain, index, window, horizon_ms).tx(txid)


@dataclass
class Classification:
    labels: dict[str, str]  # hash -> class value or UNKNOWN_TO_CHAIN
    kinds: dict[str, str]
    first: dict[str, FirstObservation]
    errors: dict[str, str] = field(default_factory=dict)

    def of(self, label: str) -> list[str]:
        return sorted(h for h, c in self.labels.items() if c == label)

    def counts(self) -> dict[str, int]:
        out = {c.value: 0 for c in (*BlockClass, *TxClass)}
        out[UNKNOWN_TO_CHAIN] = 0
        for c in self.labels.values():
            out[c] += 1
        return out

    def mdlb(self, chain: ChainView) -> list[str]:
        """MDLB hashes in height order."""
        return sorted(self.of(BlockClass.MDLB.value), key=lambda h: chain.blocks[h].height)


def classify_all(
    chain: ChainView, index: EventIndex, window: ListeningWindow, horizon_ms: int | None = None
) -> Classification:
    clf = Classifier(chain, index, window, horizon_ms)
    labels, kinds, first, errors = {}, {}, {}, {}
    for h in index.hashes():
        fo = index.first_observation(h)
        first[h] = fo
        kinds[h] = fo.kind
        if fo.kind == "block":
            try:
                labels[h] = clf.block(h).value
            except UnknownToChain:
                labels[h] = UNKNOWN_TO_CHAIN
                errors[h] = "block not present in ledger"
        else:
            labels[h] = clf.tx(h).value
    if errors:
        log.warning("%d observed blocks are unknown to the ledger", len(errors))
    return Classification(labels, kinds, first, errors)


@dataclass
class AnalysisSet:
    txids: frozenset[str]
    steps: dict[str, int]  # counted exclusion steps, in application order


def build_analysis_set(cls: Classification, chain: ChainView, index: EventIndex) -> AnalysisSet:
    """Apply the exclusion rules to an existing classification."""
    clf_chain = chain.with_observations(index.first_seen())
    steps: dict[str, int] = {}
    candidates = {h for h, c in cls.labels.items() if c in (TxClass.BT.value, TxClass.UNCONFIRMED.value)}
    steps["bt_or_unconfirmed"] = len(candidates)
    steps["echo_not_considered"] = sum(1 for c in cls.labels.values() if c == TxClass.ET.value)
    steps["invalid_not_considered"] = sum(1 for c in cls.labels.values() if c == TxClass.IT.value)

    mdlb = cls.mdlb(chain)
    intervals = []
    if mdlb:
        # Listening began while the first MDLB was being mined, so everything
        # seen before it belongs to its interval.
        intervals.append(("first_mdlb_interval", -math.inf, clf_chain.seen_ms(mdlb[0])))
        intervals.append(("last_mdlb_interval", *mining_interval(clf_chain, mdlb[-1])))
    for name, start, end in intervals:
        before = len(candidates)
        candidates = {h for h in candidates if not (start <= cls.first[h].first_ts_ms < end)}
        steps[name] = before - len(candidates)

    before = len(candidates)
    candidates = {h for h in candidates if not chain.txs[h].locktime_set}
    steps["locktime_set"] = before - len(candidates)
    before = len(candidates)
    candidates = {h for h in candidates if not chain.txs[h].is_coinbase}
    steps["coinbase"] = before - len(candidates)
    steps["analysed"] = len(candidates)
    for name, n in steps.items():
        log.info("analysis set: %s = %d", name, n)
    return AnalysisSet(frozenset(candidates), steps)


def analysis_set(
    chain: ChainView, index: EventIndex, window: ListeningWindow, horizon_ms: int | None = None
) -> frozenset[str]:
    return build_analysis_set(classify_all(chain, index, window, horizon_ms), chain, index).txids


CSV_HEADER = ["hash", "kind", "class", "first_ts_ms", "first_peer"]


def write_classification(path: str | os.PathLike, cls: Classification) -> None:
    rows = sorted(cls.first.values(), key=lambda f: (f.first_ts_ms, f.hash))
    with open(path, "w", newline="\n", encoding="ascii") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for f in rows:
            w.writerow([f.hash, f.kind, cls.labels[f.hash], f.first_ts_ms, f.first_peer])


def read_classification(path: str | os.PathLike) -> Classification:
    labels, kinds, first = {}, {}, {}
    with open(path, newline="", encoding="ascii") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        for h, kind, label, ts, peer in reader:
            labels[h] = label
            kinds[h] = kind
            first[h] = FirstObservation(h, kind, int(ts), peer)
    errors = {h: "block not present in ledger" for h, c in labels.items() if c == UNKNOWN_TO_CHAIN}
    return Classification(labels, kinds, first, errors)


def summary_lines(cls: Classification) -> Iterable[str]:
    for name, n in cls.counts().items():
        yield f"{name:>16} {n}"
