"""
Propagation and inclusion-latency statistics over a classified log.

All monetary values are integer satoshi; times in the log and ledger are
milliseconds, times in results are seconds unless a name says otherwise.
"""

from __future__ import annotations

import bisect
import csv
import json
import logging
import math
import os
import statistics
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .chainview import ChainView
from .classify import AnalysisSet, Classification, TxClass, build_analysis_set, mining_interval
from .errors import (
    EmptySet,
    NoBlocks,
    NonDecaying,
    NotInAnalysisSet,
    NotIncluded,
    OutOfRange,
    TooFewBins,
    TooFewBlocks,
)
from .eventlog import EventIndex

log = logging.getLogger(__name__)

HOUR_S = 3600
DAY_S = 86_400
SATS_PER_BTC = 100_000_000

# Values measured on the live network in May 2016. They cannot be re-measured
# and are reported for side-by-side comparison only.
REFERENCE = {
    "testable_against_live_network": False,
    "delta_seconds": 2800.0,
    "delta_blocks": 4.1,
    "block_interval_mean_s": 550.05,
    "block_interval_median_s": 383.25,
    "block_interval_min_s": -5.48,
    "block_interval_max_s": 4650.09,
    "propagation_fraction_at_1s": 0.10,
    "propagation_fraction_at_10s": 0.60,
    "not_included_at_1h": 0.43,
    "not_included_at_30d": 0.20,
    "value_included_at_3h": 0.93,
    "value_included_at_30d": 0.999,
}


# -- per-transaction delays ---------------------------------------------------


class Study:
    """Delays of the analysed transactions for one log/ledger pair."""

    def __init__(
        self,
        chain: ChainView,
        index: EventIndex,
        classification: Classification,
        horizon_ms: int | None = None,
        analysis: AnalysisSet | None = None,
    ):
        self.index = index
        self.classification = classification
        self.horizon_ms = horizon_ms
        self.chain = chain.with_observations(index.first_seen())
        self.analysis = analysis or build_analysis_set(classification, chain, index)

    def _included(self, txid: str):
        if txid not in self.analysis.txids:
            raise NotInAnalysisSet(txid)
        if self.classification.labels[txid] != TxClass.BT.value:
            raise NotIncluded(txid)
        return self.chain.txs[txid].included_in

    def delay_seconds(self, txid: str) -> float:
        block = self._included(txid)
        return (self.chain.seen_ms(block) - self.classification.first[txid].first_ts_ms) / 1000.0

    def delay_blocks(self, txid: str) -> int:
        block = self._included(txid)
        tip = self.chain.tip_height_at(self.classification.first[txid].first_ts_ms)
        return self.chain.blocks[block].height - tip

    def included(self) -> list[str]:
        return sorted(h for h in self.analysis.txids if self.classification.labels[h] == TxClass.BT.value)

    def censored(self) -> list[str]:
        return sorted(h for h in self.analysis.txids if self.classification.labels[h] != TxClass.BT.value)

    def horizon_s(self) -> float:
        """Longest delay the data could reveal for the analysed set."""
        if not self.analysis.txids:
            return 1.0
        if self.horizon_ms is not None:
            earliest = min(self.classification.first[h].first_ts_ms for h in self.analysis.txids)
            return max(1.0, (self.horizon_ms - earliest) / 1000.0)
        delays = [self.delay_seconds(h) for h in self.included()]
        return max([1.0, *delays])


# -- histogram and fit --------------------------------------------------------


@dataclass
class DelayHistogram:
    bin_width: float
    bins: list[tuple[float, int]]  # (lower edge, count), contiguous from 0
    censored_count: int = 0

    @property
    def total(self) -> int:
        return sum(c for _, c in self.bins)


def delay_histogram(
    delays: Iterable[float], bin_width: float, horizon: float | None = None, censored: int = 0
) -> DelayHistogram:
    """Bin delays over ``[0, horizon)``; delays at or past the horizon count as censored."""
    if bin_width <= 0:
        raise ValueError("bin_width must be positive")
    counts: dict[int, int] = defaultdict(int)
    for d in delays:
        if d < 0:
            raise ValueError(f"negative delay {d}")
        if horizon is not None and d >= horizon:
            censored += 1
            continue
        counts[int(d // bin_width)] += 1
    if not counts:
        raise EmptySet("no included delays to bin", censored_count=censored)
    top = max(counts)
    bins = [(i * bin_width, counts.get(i, 0)) for i in range(top + 1)]
    return DelayHistogram(bin_width, bins, censored)


@dataclass
class FitResult:
    delta: float
    amplitude: float
    rms_log_residual: float
    bins_used: int


def fit_exponential(hist: DelayHistogram, min_count: float = 1) -> FitResult:
    """Least-squares line through log(count) vs bin centre; delta = -1/slope."""
    pts = [(lo + hist.bin_width / 2, c) for lo, c in hist.bins if c >= min_count and c > 0]
    if len(pts) < 3:
        raise TooFewBins(f"{len(pts)} usable bins, need 3")
    x = np.array([p[0] for p in pts], dtype=float)
    y = np.log(np.array([p[1] for p in pts], dtype=float))
    slope, intercept = np.polyfit(x, y, 1)
    if slope >= 0:
        raise NonDecaying(f"slope {slope:.3g} >= 0")
    resid = y - (slope * x + intercept)
    return FitResult(-1.0 / slope, float(math.exp(intercept)), float(np.sqrt(np.mean(resid**2))), len(pts))


# -- cumulative inclusion -----------------------------------------------------


def log_grid(t_max: float, points: int = 200, t_min: float = 1.0) -> list[float]:
    t_max = max(t_max, t_min * 1.000001)
    return [float(t) for t in np.logspace(math.log10(t_min), math.log10(t_max), points)]


@dataclass
class CumulativeInclusion:
    grid: list[float]
    fraction_by_count: list[float]
    fraction_by_value: list[float]
    # sorted included delays and matching cumulative values, for exact lookups
    _delays: list[float] = field(repr=False, default_factory=list)
    _cum_value: list[int] = field(repr=False, default_factory=list)
    _n: int = 0
    _total_value: int = 0

    def count_at(self, t: float) -> float:
        return bisect.bisect_right(self._delays, t) / self._n

    def value_at(self, t: float) -> float:
        i = bisect.bisect_right(self._delays, t)
        if not self._total_value:
            return 0.0
        return (self._cum_value[i - 1] if i else 0) / self._total_value


def cumulative_inclusion(
    entries: Sequence[tuple[float | None, int]], horizon: float, points: int = 200
) -> CumulativeInclusion:
    """``entries`` are ``(delay_s or None if censored, value_sats)`` for the whole set."""
    if not entries:
        raise EmptySet("no transactions")
    included = sorted((d, v) for d, v in entries if d is not None)
    delays = [d for d, _ in included]
    cum, running = [], 0
    for _, v in included:
        running += v
        cum.append(running)
    total_value = sum(v for _, v in entries)
    out = CumulativeInclusion([], [], [], delays, cum, len(entries), total_value)
    out.grid = log_grid(horizon, points)
    out.fraction_by_count = [out.count_at(t) for t in out.grid]
    out.fraction_by_value = [out.value_at(t) for t in out.grid]
    return out


def observed_cumulative(study: Study, points: int = 200) -> CumulativeInclusion:
    """Cumulative inclusion over every observed BT or UNCONFIRMED tx, ignoring the exclusions."""
    labels = study.classification.labels
    entries = []
    for h in sorted(h for h, c in labels.items() if c in (TxClass.BT.value, TxClass.UNCONFIRMED.value)):
        d = None
        if labels[h] == TxClass.BT.value:
            block = study.chain.txs[h].included_in
            d = (study.chain.seen_ms(block) - study.classification.first[h].first_ts_ms) / 1000.0
        entries.append((d, study.chain.txs[h].value_sats))
    return cumulative_inclusion(entries, study.horizon_s(), points)


def study_cumulative(study: Study, points: int = 200) -> CumulativeInclusion:
    entries = []
    for h in sorted(study.analysis.txids):
        d = study.delay_seconds(h) if study.classification.labels[h] == TxClass.BT.value else None
        entries.append((d, study.chain.txs[h].value_sats))
    return cumulative_inclusion(entries, study.horizon_s(), points)


# -- propagation --------------------------------------------------------------


@dataclass
class PropagationSummary:
    grid: list[float]  # seconds since first observation
    curves: dict[str, list[float]]  # block hash -> reached count on the grid
    mean: list[float]
    p10: list[float]
    p90: list[float]


def propagation_grid(t_max_s: float, points: int = 120) -> list[float]:
    return [0.0] + log_grid(max(t_max_s, 0.002), points - 1, t_min=0.001)


def propagation_analysis(
    blocks: Sequence[str],
    index: EventIndex,
    chain: ChainView,
    grid: Sequence[float] | None = None,
    normalize_by: int | None = None,
) -> PropagationSummary:
    """Reach curves of ``blocks`` truncated at the next higher main-chain observation.

    A curve holds its last value once truncated, so every curve, and the
    aggregates, are defined on the whole grid.
    """
    if not blocks:
        raise NoBlocks("no MDLB blocks")
    observed = chain.with_observations(index.first_seen())
    main_seen = sorted(
        (b.height, observed.block_seen_ms[b.hash]) for b in observed.main_chain() if b.hash in observed.block_seen_ms
    )
    series = {}
    for bhash in blocks:
        height = observed.blocks[bhash].height
        start = observed.block_seen_ms[bhash]
        later = [ts for h, ts in main_seen if h > height]
        until = min(later) if later else None
        series[bhash] = [(ts - start, n) for ts, n in index.reach_count_series(bhash, until)]
    if grid is None:
        longest = max(s[-1][0] for s in series.values()) / 1000.0
        grid = propagation_grid(longest)
    scale = float(normalize_by) if normalize_by else 1.0
    curves = {}
    for bhash, steps in series.items():
        times = [t for t, _ in steps]
        counts = [n for _, n in steps]
        row = []
        for t in grid:
            i = bisect.bisect_right(times, t * 1000.0 + 1e-9)
            row.append((counts[i - 1] if i else 0) / scale)
        curves[bhash] = row
    matrix = np.array(list(curves.values()), dtype=float)
    return PropagationSummary(
        list(grid),
        curves,
        matrix.mean(axis=0).tolist(),
        np.percentile(matrix, 10, axis=0).tolist(),
        np.percentile(matrix, 90, axis=0).tolist(),
    )


# -- block timing -------------------------------------------------------------


def _stats(values: list[float]) -> dict[str, float]:
    return {
        "count": len(values),
        "min": min(values),
        "max": max(values),
        "mean": statistics.fmean(values),
        "variance": statistics.pvariance(values),
        "std": statistics.pstdev(values),
        "median": statistics.median(values),
    }


def block_interval_stats(mdlb: Sequence[str], chain: ChainView) -> dict[str, dict[str, float]]:
    """Intervals between MDLBs at consecutive heights, by observation and by block timestamp.

    ``chain`` should carry observations (:meth:`ChainView.with_observations`).
    """
    by_height = sorted((chain.blocks[h].height, h) for h in mdlb)
    listening, blockchain = [], []
    for (h0, a), (h1, b) in zip(by_height, by_height[1:]):
        if h1 != h0 + 1:
            continue
        listening.append((chain.seen_ms(b) - chain.seen_ms(a)) / 1000.0)
        blockchain.append((chain.blocks[b].time_ms - chain.blocks[a].time_ms) / 1000.0)
    if not listening:
        raise TooFewBlocks("need two MDLBs at consecutive heights")
    return {"listening_time": _stats(listening), "blockchain_time": _stats(blockchain)}


# -- rates and per-delay aggregates -------------------------------------------


def rate_per_hour(
    index: EventIndex, classification: Classification, classes: Iterable[str] | None = None
) -> list[tuple[int, int]]:
    """Distinct transactions first observed in each UTC hour, zero hours included."""
    wanted = None if classes is None else {str(getattr(c, "value", c)) for c in classes}
    hour_ms = HOUR_S * 1000
    counts: dict[int, int] = defaultdict(int)
    all_hours = set()
    for h, f in classification.first.items():
        if classification.kinds[h] != "tx":
            continue
        bucket = f.first_ts_ms // hour_ms * hour_ms
        all_hours.add(bucket)
        if wanted is None or classification.labels[h] in wanted:
            counts[bucket] += 1
    if not all_hours:
        return []
    lo, hi = min(all_hours), max(all_hours)
    return [(b, counts.get(b, 0)) for b in range(lo, hi + hour_ms, hour_ms)]


def _mean_by_delay(study: Study, attr: str) -> list[tuple[int, float]]:
    groups: dict[int, list[int]] = defaultdict(list)
    for h in study.included():
        groups[study.delay_blocks(h)].append(getattr(study.chain.txs[h], attr))
    if not groups:
        raise EmptySet(f"no included transactions for {attr}")
    return [(d, statistics.fmean(v)) for d, v in sorted(groups.items())]


def value_vs_delay(study: Study) -> list[tuple[int, float]]:
    return _mean_by_delay(study, "value_sats")


def fee_vs_delay(study: Study) -> list[tuple[int, float]]:
    return _mean_by_delay(study, "fee_sats")


@dataclass
class BlockTxCount:
    block_hash: str
    height: int
    observed: int
    included: int


def tx_per_block_comparison(index: EventIndex, chain: ChainView, mdlb: Sequence[str]) -> list[BlockTxCount]:
    """New transactions seen while each MDLB was mined vs. transactions it carries.

    The coinbase is left out of the included count since it is never relayed.
    """
    if not mdlb:
        raise NoBlocks("no MDLB blocks")
    observed_chain = chain.with_observations(index.first_seen())
    firsts = sorted(f for f in index.first_seen_by_kind("tx"))
    rows = []
    for bhash in sorted(mdlb, key=lambda h: chain.blocks[h].height):
        start, end = mining_interval(observed_chain, bhash)
        n_obs = max(0, bisect.bisect_left(firsts, end) - bisect.bisect_left(firsts, start))
        block = chain.blocks[bhash]
        n_inc = sum(1 for t in block.txids if not chain.txs[t].is_coinbase)
        rows.append(BlockTxCount(bhash, block.height, n_obs, n_inc))
    return rows


# -- full pipeline ------------------------------------------------------------

FIGURE_FILES = (
    "propagation_curves.csv",
    "delay_hist_seconds.csv",
    "delay_hist_blocks.csv",
    "cumulative_count.csv",
    "cumulative_value.csv",
    "value_vs_delay.csv",
    "fee_vs_delay.csv",
    "tx_per_block.csv",
    "tx_rate_per_hour.csv",
)


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="", encoding="ascii") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _fmt(v):
    if isinstance(v, float):
        return repr(round(v, 9))
    return v


def analyze(
    chain: ChainView,
    index: EventIndex,
    classification: Classification,
    out_dir: str | os.PathLike,
    horizon_ms: int | None = None,
    bin_width_s: float = 600.0,
    bin_width_blocks: float = 1.0,
    grid_points: int = 200,
) -> dict:
    """Compute every figure and write them to ``out_dir``; return the summary dict."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name in FIGURE_FILES:
        # a figure this run cannot produce must not survive from an earlier run
        (out / name).unlink(missing_ok=True)
    study = Study(chain, index, classification, horizon_ms)
    observed = study.chain
    mdlb = classification.mdlb(chain)
    missing: dict[str, str] = {}
    summary: dict = {
        "class_counts": classification.counts(),
        "analysis_set": dict(study.analysis.steps),
        "horizon_ms": horizon_ms,
    }

    # propagation
    try:
        peers = len({e.peer for e in index.iterate(kind="block")})
        prop = propagation_analysis(mdlb, index, chain)
        _write_csv(
            out / "propagation_curves.csv",
            ["t_s", "mean", "p10", "p90", *(f"h{chain.blocks[b].height}" for b in prop.curves)],
            (
                [t, prop.mean[i], prop.p10[i], prop.p90[i], *(c[i] for c in prop.curves.values())]
                for i, t in enumerate(prop.grid)
            ),
        )
        summary["propagation"] = {
            "blocks": len(prop.curves),
            "block_announcing_peers": peers,
            "fraction_at_1s": _interp_step(prop.grid, prop.mean, 1.0) / peers,
            "fraction_at_10s": _interp_step(prop.grid, prop.mean, 10.0) / peers,
        }
    except NoBlocks as err:
        missing["propagation_curves.csv"] = str(err)

    # block timing
    try:
        summary["block_intervals"] = block_interval_stats(mdlb, observed)
    except TooFewBlocks as err:
        missing["block_intervals"] = str(err)

    # inclusion delay
    included = study.included()
    horizon_s = study.horizon_s()
    censored = len(study.censored())
    delays_s = [study.delay_seconds(h) for h in included]
    delays_b, skipped = [], 0
    for h in included:
        try:
            delays_b.append(study.delay_blocks(h))
        except OutOfRange:
            skipped += 1
    for name, delays, width, key in (
        ("delay_hist_seconds.csv", delays_s, bin_width_s, "delta_seconds"),
        ("delay_hist_blocks.csv", delays_b, bin_width_blocks, "delta_blocks"),
    ):
        try:
            hist = delay_histogram(delays, width, horizon_s if key == "delta_seconds" else None, censored)
        except EmptySet as err:
            missing[name] = str(err)
            continue
        _write_csv(out / name, ["lower", "count"], hist.bins)
        summary.setdefault("histograms", {})[name] = {
            "bin_width": width,
            "binned": hist.total,
            "censored": hist.censored_count,
        }
        try:
            summary[key] = asdict(fit_exponential(hist))
        except (TooFewBins, NonDecaying) as err:
            summary[key] = None
            missing[key] = str(err)

    # cumulative inclusion
    try:
        cum = study_cumulative(study, grid_points)
        _write_csv(out / "cumulative_count.csv", ["t_s", "fraction_included"], zip(cum.grid, cum.fraction_by_count))
        _write_csv(out / "cumulative_value.csv", ["t_s", "value_fraction_included"], zip(cum.grid, cum.fraction_by_value))
        summary["fractions"] = {
            "set_size": cum._n,
            "included_at_1h": cum.count_at(HOUR_S),
            "not_included_at_1h": 1 - cum.count_at(HOUR_S),
            "not_included_at_30d": 1 - cum.count_at(30 * DAY_S),
            "value_included_at_3h": cum.value_at(3 * HOUR_S),
            "value_included_at_30d": cum.value_at(30 * DAY_S),
            "horizon_s": horizon_s,
        }
    except EmptySet as err:
        missing["cumulative_count.csv"] = missing["cumulative_value.csv"] = str(err)
    # the same fractions before any exclusion, over every observed BT or
    # UNCONFIRMED transaction
    try:
        every = observed_cumulative(study, grid_points)
        summary["fractions_observed"] = {
            "set_size": every._n,
            "not_included_at_1h": 1 - every.count_at(HOUR_S),
            "not_included_at_30d": 1 - every.count_at(30 * DAY_S),
            "value_included_at_3h": every.value_at(3 * HOUR_S),
            "value_included_at_30d": every.value_at(30 * DAY_S),
        }
    except EmptySet:
        summary["fractions_observed"] = None

    # value and fee against delay
    for name, fn, col in (
        ("value_vs_delay.csv", value_vs_delay, "mean_value_sats"),
        ("fee_vs_delay.csv", fee_vs_delay, "mean_fee_sats"),
    ):
        try:
            _write_csv(out / name, ["delay_blocks", col], fn(study))
        except (EmptySet, OutOfRange) as err:
            missing[name] = str(err)

    # tx per block interval
    try:
        rows = tx_per_block_comparison(index, chain, mdlb)
        _write_csv(
            out / "tx_per_block.csv",
            ["height", "block_hash", "observed", "included"],
            ([r.height, r.block_hash, r.observed, r.included] for r in rows),
        )
    except NoBlocks as err:
        missing["tx_per_block.csv"] = str(err)

    # hourly tx rate
    valid = {r[0]: r[1] for r in rate_per_hour(index, classification, [TxClass.BT, TxClass.ET])}
    invalid = {r[0]: r[1] for r in rate_per_hour(index, classification, [TxClass.IT])}
    unconf = {r[0]: r[1] for r in rate_per_hour(index, classification, [TxClass.UNCONFIRMED])}
    _write_csv(
        out / "tx_rate_per_hour.csv",
        ["hour_start_ms", "bt_et", "it", "unconfirmed"],
        ([h, valid[h], invalid[h], unconf[h]] for h in sorted(valid)),
    )

    summary["missing"] = missing
    summary["reference"] = dict(REFERENCE)
    summary["comparison"] = _comparison(summary)
    with open(out / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary


def _interp_step(grid: Sequence[float], values: Sequence[float], t: float) -> float:
    i = bisect.bisect_right(grid, t)
    return values[i - 1] if i else 0.0


def _comparison(summary: Mapping) -> list[dict]:
    def get(*path):
        node = summary
        for p in path:
            if not isinstance(node, Mapping) or node.get(p) is None:
                return None
            node = node[p]
        return node

    rows = [
        ("delta_seconds", get("delta_seconds", "delta")),
        ("delta_blocks", get("delta_blocks", "delta")),
        ("block_interval_mean_s", get("block_intervals", "listening_time", "mean")),
        ("block_interval_median_s", get("block_intervals", "listening_time", "median")),
        ("block_interval_min_s", get("block_intervals", "listening_time", "min")),
        ("block_interval_max_s", get("block_intervals", "listening_time", "max")),
        ("propagation_fraction_at_1s", get("propagation", "fraction_at_1s")),
        ("propagation_fraction_at_10s", get("propagation", "fraction_at_10s")),
        ("not_included_at_1h", get("fractions", "not_included_at_1h")),
        ("not_included_at_30d", get("fractions", "not_included_at_30d")),
        ("value_included_at_3h", get("fractions", "value_included_at_3h")),
        ("value_included_at_30d", get("fractions", "value_included_at_30d")),
    ]
    return [
        {"quantity": name, "measured": measured, "reference": REFERENCE[name], "testable": False}
        for name, measured in rows
    ]
