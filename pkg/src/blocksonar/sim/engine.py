"""
In-process discrete-event simulation.

Gossip is flooding over fixed per-link latencies, so the first arrival of an
object at a peer is ``t_origin + shortest-path delay``; those arrivals are
computed in bulk from the all-pairs distance matrix. Mining is event driven:
a priority queue of mining events is drained in time order and each event
reads the arrivals known so far to build its block.
"""

from __future__ import annotations

import hashlib
import heapq
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import networkx as nx
import numpy as np

from ..chainview import BlockRecord, TxRecord, block_line, loose_tx_line
from ..eventlog import InvEvent, write_events
from .config import SimConfig
from .topology import assign_latencies, build_topology, distance_matrix, peer_name

log = logging.getLogger(__name__)

NEVER = np.int64(2**62)
SUBSIDY_SATS = 5_000_000_000


@dataclass
class SimBlock:
    seq: int
    hash: str
    height: int
    prev: str
    mined_ms: int
    time_ms: int
    miner: int  # peer index; -1 for pre-listening blocks
    kind: str  # prehistory | live | competitor | invalid
    txs: list[int] = field(default_factory=list)
    rejected: list[int] = field(default_factory=list)  # eligible but refused by policy or cap
    coinbase: str = ""
    coinbase_value: int = SUBSIDY_SATS
    ancestry: np.ndarray | None = field(default=None, repr=False)
    main_chain: bool = False

    @property
    def pow_valid(self) -> bool:
        return self.kind != "invalid"


@dataclass
class SimResult:
    config: SimConfig
    graph: nx.Graph
    dist: np.ndarray
    peers: list[str]
    miners: list[int]
    start_ms: int
    end_ms: int
    blocks: list[SimBlock]
    txids: list[str]
    tx_t0: np.ndarray
    tx_origin: np.ndarray
    tx_value: np.ndarray
    tx_fee: np.ndarray
    tx_valid: np.ndarray
    tx_private: np.ndarray
    tx_locktime: np.ndarray
    arrive: np.ndarray  # (tx, peer) first arrival ms, NEVER if not delivered
    events: list[InvEvent]
    ledger_lines: list[str]
    conservation: dict
    echo_peer: int = -1
    monitor_sent: list[str] = field(default_factory=list)
    # in loopback mode ``events`` is what the crawler logged and this is the plan
    scheduled: list[InvEvent] | None = None

    def ledger_text(self) -> str:
        return "".join(line + "\n" for line in self.ledger_lines)

    def block_by_hash(self) -> dict[str, SimBlock]:
        return {b.hash: b for b in self.blocks}

    def deliveries(self) -> dict[tuple[str, str], tuple[str, int]]:
        """Scheduled monitor deliveries: ``(peer, hash) -> (kind, ts_ms)``."""
        planned = self.events if self.scheduled is None else self.scheduled
        return {(e.peer, e.hash): (e.kind, e.ts_ms) for e in planned}

    def audit_records(self):
        cfg = self.config
        yield {"event": "run", "rng_seed": cfg.rng_seed, "start_ms": self.start_ms, "end_ms": self.end_ms,
               "peers": len(self.peers), "miners": [self.peers[m] for m in self.miners]}
        for i, txid in enumerate(self.txids):
            yield {"event": "tx_created", "t": int(self.tx_t0[i]), "hash": txid,
                   "origin": self.peers[int(self.tx_origin[i])], "valid": bool(self.tx_valid[i]),
                   "private": bool(self.tx_private[i])}
        for b in self.blocks:
            yield {"event": "block_mined", "t": b.mined_ms, "hash": b.hash, "height": b.height, "kind": b.kind,
                   "miner": self.peers[b.miner] if b.miner >= 0 else None, "main_chain": b.main_chain,
                   "txs": len(b.txs), "rejected": len(b.rejected)}
        for e in self.events if self.scheduled is None else self.scheduled:
            yield {"event": "deliver", "t": e.ts_ms, "peer": e.peer, "kind": e.kind, "hash": e.hash}
        yield {"event": "conservation", **self.conservation}
        yield {"event": "monitor_sent", "commands": list(self.monitor_sent)}

    def write(self, out_dir: str | os.PathLike) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"ledger": out / "ledger.jsonl", "log": out / "events.csv", "audit": out / "audit.jsonl"}
        paths["ledger"].write_text(self.ledger_text(), encoding="utf-8")
        write_events(paths["log"], self.events)
        with open(paths["audit"], "w", encoding="utf-8") as fh:
            for rec in self.audit_records():
                fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
        return paths


class _Hasher:
    def __init__(self, seed: int):
        self.prefix = f"blocksonar-sim:{seed}:"

    def __call__(self, tag: str, i: int) -> str:
        return hashlib.sha256(f"{self.prefix}{tag}:{i}".encode()).hexdigest()


def run(config: SimConfig) -> SimResult:
    """Simulate one network run in process; bitwise deterministic in ``rng_seed``."""
    cfg = config.validate()
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(cfg.rng_seed).spawn(7)]
    r_topo, r_lat, r_blocks, r_txs, r_policy, r_inject, r_miners = streams
    H = _Hasher(cfg.rng_seed)

    graph = build_topology(cfg, r_topo)
    assign_latencies(graph, cfg, r_lat)
    dist = distance_matrix(graph)
    n = cfg.peer_count
    peers = [peer_name(i) for i in range(n)]
    miners = sorted(int(m) for m in r_miners.choice(n, cfg.miner_count, replace=False))
    start = cfg.start_ms
    mean = cfg.block_interval_mean_ms

    # -- schedule of primary mining events --------------------------------------
    if cfg.block_interval_model == "fixed":
        gaps = np.full(cfg.block_count, mean, dtype=np.int64)
    else:
        gaps = np.maximum(1, np.rint(r_blocks.exponential(mean, cfg.block_count))).astype(np.int64)
    mine_times = start + np.cumsum(gaps)
    end = int(mine_times[-1]) + cfg.end_tail_ms
    k = cfg.block_count
    ev_miner = np.array(miners)[r_miners.integers(len(miners), size=k)]
    jitter = r_blocks.integers(-cfg.time_jitter_ms, cfg.time_jitter_ms + 1, size=(k, 2))
    fork_u = r_inject.random(k)
    comp_delay = r_inject.integers(1, cfg.race_window_ms + 1, size=k)
    comp_pick = r_inject.integers(len(miners) - 1 if len(miners) > 1 else 1, size=k)
    ib_u = r_inject.random(k)
    ib_delay = r_inject.integers(1, cfg.race_window_ms + 1, size=k)
    ib_origin = r_inject.integers(n, size=k)
    echo_peer = int(r_inject.integers(n))

    # -- transactions -------------------------------------------------------------
    tx_end = max(start, end - cfg.tx_cutoff_ms)
    n_tx = int(r_txs.poisson(cfg.tx_rate_per_s * (tx_end - start) / 1000.0)) if tx_end > start else 0
    t0 = np.sort(r_txs.integers(start, tx_end, size=n_tx)) if n_tx else np.zeros(0, dtype=np.int64)
    origin = r_txs.integers(n, size=n_tx)
    lo, hi = np.log(cfg.value_min_sats), np.log(cfg.value_max_sats)
    value = np.clip(np.rint(np.exp(r_txs.uniform(lo, hi, n_tx))), cfg.value_min_sats, cfg.value_max_sats)
    value = value.astype(np.int64)
    fee = r_txs.integers(cfg.fee_min_sats, cfg.fee_max_sats + 1, size=n_tx)
    invalid = r_txs.random(n_tx) < cfg.invalid_tx_frac
    private = ~invalid & (r_txs.random(n_tx) < cfg.echo_tx_frac)
    locktime = r_txs.random(n_tx) < cfg.locktime_frac
    private_miner = np.array(miners)[r_txs.integers(len(miners), size=n_tx)]
    origin = np.where(private, private_miner, origin)
    txids = [H("tx", i) for i in range(n_tx)]

    arrive = t0[:, None] + dist[origin]
    arrive[private] = NEVER
    if invalid.any():
        # invalid transactions are announced by their origin and dropped by everyone else
        rows = np.nonzero(invalid)[0]
        arrive[rows] = NEVER
        arrive[rows, origin[rows]] = t0[rows]
    valid = ~invalid
    mined_private = np.zeros(n_tx, dtype=bool)

    # -- blocks -------------------------------------------------------------------
    blocks: list[SimBlock] = []

    def new_block(**kw) -> SimBlock:
        b = SimBlock(seq=len(blocks), **kw)
        b.coinbase = H("coinbase", b.seq)
        blocks.append(b)
        return b

    prev = "0" * 64
    for i in range(cfg.prehistory_blocks):
        t = start - (cfg.prehistory_blocks - i) * mean
        b = new_block(hash=H("block", -1 - i), height=i, prev=prev, mined_ms=t, time_ms=t, miner=-1,
                      kind="prehistory")
        b.ancestry = np.zeros(n_tx, dtype=bool)
        prev = b.hash

    def accept_ms(b: SimBlock, peer: int) -> int:
        return b.mined_ms if b.miner < 0 else b.mined_ms + int(dist[b.miner, peer])

    def tip_for(peer: int, t: int) -> SimBlock:
        best, key = None, None
        for b in blocks:
            if not b.pow_valid:
                continue
            a = accept_ms(b, peer)
            if a >= t and b.miner >= 0:
                continue
            cand = (-b.height, a, b.seq)
            if key is None or cand < key:
                best, key = b, cand
        return best

    def mine(t: int, miner: int, parent: SimBlock, kind: str, jit: int) -> SimBlock:
        anc = parent.ancestry
        eligible = (arrive[:, miner] < t) & valid & ~anc
        idx = np.nonzero(eligible)[0]
        keep = np.ones(len(idx), dtype=bool)
        pol = cfg.policy
        if pol.kind == "VALUE_THRESHOLD":
            keep &= value[idx] >= pol.threshold_sats
        elif pol.kind == "SKIP_PROB" and len(idx):
            p = np.array([pol.skip_probability(int(v)) for v in value[idx]]) if pol.skip_below_sats is not None \
                else np.full(len(idx), pol.skip_prob)
            keep &= ~(r_policy.random(len(idx)) < p)
        kept = idx[keep]
        rejected = idx[~keep]
        if pol.max_block_txs and len(kept) > pol.max_block_txs:
            rejected = np.sort(np.concatenate([rejected, kept[pol.max_block_txs:]]))
            kept = kept[: pol.max_block_txs]
        own = np.nonzero(private & ~mined_private & (origin == miner) & (t0 < t) & ~anc)[0]
        # privately held transactions go in first and are announced once the block is out
        txs = [int(i) for i in own] + [int(i) for i in kept]
        if len(own):
            mined_private[own] = True
            arrive[own] = t + cfg.echo_delay_ms + dist[miner][None, :]
        b = new_block(hash=H("block", len(blocks)), height=parent.height + 1, prev=parent.hash, mined_ms=t,
                      time_ms=t + jit, miner=miner, kind=kind, txs=txs, rejected=[int(i) for i in rejected])
        b.ancestry = anc.copy()
        b.ancestry[txs] = True
        b.coinbase_value = SUBSIDY_SATS + int(fee[txs].sum()) if txs else SUBSIDY_SATS
        return b

    queue: list[tuple[int, int, int, int]] = [(int(t), j, j, -1) for j, t in enumerate(mine_times)]
    heapq.heapify(queue)
    pushed = k
    rival_of: dict[int, int] = {}
    first_live: SimBlock | None = None
    while queue:
        t, _, j, parent_seq = heapq.heappop(queue)
        if parent_seq < 0:
            miner = int(ev_miner[j])
            parent = tip_for(miner, t)
            b = mine(t, miner, parent, "live", int(jitter[j, 0]))
            first_live = first_live or b
            if fork_u[j] < cfg.fork_prob:
                others = [m for m in miners if m != miner]
                rival = others[int(comp_pick[j]) % len(others)]
                heapq.heappush(queue, (t + int(comp_delay[j]), pushed, j, parent.seq))
                pushed += 1
                rival_of[j] = rival
            if ib_u[j] < cfg.invalid_block_prob:
                new_block(hash=H("invalid", j), height=parent.height + 1, prev=parent.hash,
                          mined_ms=t + int(ib_delay[j]), time_ms=t + int(ib_delay[j]), miner=int(ib_origin[j]),
                          kind="invalid")
        else:
            rival = rival_of[j]
            mine(t, rival, blocks[parent_seq], "competitor", int(jitter[j, 1]))

    # -- main chain: longest, earliest-mined wins ties -----------------------------
    tip = min((b for b in blocks if b.pow_valid), key=lambda b: (-b.height, b.mined_ms, b.seq))
    by_hash = {b.hash: b for b in blocks}
    cur = tip
    while cur is not None:
        cur.main_chain = True
        cur = by_hash.get(cur.prev)

    events = _monitor_events(cfg, blocks, peers, dist, txids, arrive, end, first_live, echo_peer)
    ledger_lines = _ledger(blocks, txids, value, fee, locktime, valid)
    conservation = _conservation(blocks, valid, n_tx)
    log.info("sim seed=%d: %d blocks, %d txs, %d events", cfg.rng_seed, len(blocks), n_tx, len(events))
    result = SimResult(cfg, graph, dist, peers, miners, start, end, blocks, txids, t0, origin, value, fee, valid,
                       private, locktime, arrive, events, ledger_lines, conservation, echo_peer)
    if cfg.monitor_mode == "loopback":
        from .loopback import replay

        lb = replay(result)
        result.scheduled = events
        result.events = sorted(lb.events, key=lambda e: (e.ts_ms, e.peer, e.hash, e.kind))
        result.monitor_sent = lb.monitor_sent
    return result


def _monitor_events(cfg, blocks, peers, dist, txids, arrive, end, first_live, echo_peer) -> list[InvEvent]:
    n = len(peers)
    ts_parts, peer_parts, obj_parts = [], [], []
    names = list(txids)
    # transactions
    tx_idx, peer_idx = np.nonzero(arrive < end)
    ts_parts.append(arrive[tx_idx, peer_idx])
    peer_parts.append(peer_idx)
    obj_parts.append(tx_idx)
    # blocks
    kinds = ["tx"] * len(names)
    for b in blocks:
        j = len(names)
        names.append(b.hash)
        kinds.append("block")
        if b.kind == "prehistory":
            if first_live is None or b.height < cfg.prehistory_blocks - cfg.echo_blocks:
                continue
            ts = np.array([first_live.mined_ms + 1], dtype=np.int64)
            who = np.array([echo_peer])
        elif b.kind == "invalid":
            ts = np.array([b.mined_ms], dtype=np.int64)
            who = np.array([b.miner])
        else:
            ts = b.mined_ms + dist[b.miner]
            who = np.arange(n)
        keep = ts < end
        ts_parts.append(ts[keep])
        peer_parts.append(who[keep])
        obj_parts.append(np.full(int(keep.sum()), j))
    ts = np.concatenate(ts_parts).astype(np.int64)
    pi = np.concatenate(peer_parts).astype(np.int64)
    oi = np.concatenate(obj_parts).astype(np.int64)
    # match EventIndex ordering: (ts, peer, hash, kind)
    peer_rank = np.empty(n, dtype=np.int64)
    peer_rank[np.argsort(np.array(peers))] = np.arange(n)
    name_rank = np.empty(len(names), dtype=np.int64)
    name_rank[np.argsort(np.array(names))] = np.arange(len(names))
    order = np.lexsort((name_rank[oi], peer_rank[pi], ts))
    return [InvEvent(int(ts[i]), peers[pi[i]], kinds[oi[i]], names[oi[i]]) for i in order]


def _ledger(blocks, txids, value, fee, locktime, valid) -> list[str]:
    lines = []
    in_block = set()
    for b in blocks:
        recs = [TxRecord(b.coinbase, b.coinbase_value, 0, False, True)]
        recs += [TxRecord(txids[i], int(value[i]), int(fee[i]), bool(locktime[i])) for i in b.txs]
        in_block.update(b.txs)
        rec = BlockRecord(b.hash, b.height, b.prev, b.time_ms, b.pow_valid, b.main_chain)
        lines.append(block_line(rec, recs))
    for i, txid in enumerate(txids):
        if i not in in_block:
            lines.append(loose_tx_line(TxRecord(txid, int(value[i]), int(fee[i]), bool(locktime[i]),
                                                valid=bool(valid[i]))))
    return lines


def _conservation(blocks, valid, n_tx) -> dict:
    """Every valid transaction is exactly one of included, policy-skipped, in a mempool."""
    main = [b for b in blocks if b.main_chain]
    included_list = [i for b in main for i in b.txs]
    included = set(included_list)
    skipped = {i for b in main for i in b.rejected} - included
    generated = int(valid.sum())
    mempool = {i for i in range(n_tx) if valid[i]} - included - skipped
    out = {
        "generated": generated,
        "included": len(included),
        "policy_skipped": len(skipped),
        "mempool": len(mempool),
        "invalid_generated": int(n_tx - generated),
        "invalid_included": sum(1 for i in included if not valid[i]),
        "double_included": len(included_list) - len(included),
    }
    out["balanced"] = (
        out["included"] + out["policy_skipped"] + out["mempool"] == generated
        and out["invalid_included"] == 0
        and out["double_included"] == 0
    )
    return out
