"""Plain-text report and gnuplot stubs from an analysis directory."""

from __future__ import annotations

import csv
import json
import os
from pathlib import Path

from .analytics import FIGURE_FILES
from .errors import MissingInputs

# figure file -> (title, x label, y label, log x, extra plot columns)
PLOTS = {
    "propagation_curves.csv": ("Nodes reached by a new block", "time since first observation (s)", "nodes", True,
                               [(2, "mean"), (3, "10th percentile"), (4, "90th percentile")]),
    "delay_hist_seconds.csv": ("Inclusion delay", "delay (s)", "transactions", False, [(2, "count")]),
    "delay_hist_blocks.csv": ("Inclusion delay", "delay (blocks)", "transactions", False, [(2, "count")]),
    "cumulative_count.csv": ("Transactions included", "time (s)", "fraction", True, [(2, "by count")]),
    "cumulative_value.csv": ("Value included", "time (s)", "fraction", True, [(2, "by value")]),
    "value_vs_delay.csv": ("Mean value vs delay", "delay (blocks)", "satoshi", False, [(2, "mean value")]),
    "fee_vs_delay.csv": ("Mean fee vs delay", "delay (blocks)", "satoshi", False, [(2, "mean fee")]),
    "tx_per_block.csv": ("Transactions per block interval", "height", "transactions", False,
                         [(3, "observed"), (4, "included")]),
    "tx_rate_per_hour.csv": ("Transactions per hour", "hour start (ms)", "transactions", False,
                             [(2, "BT+ET"), (3, "IT"), (4, "unconfirmed")]),
}


def required_inputs(analysis_dir: Path) -> tuple[dict, list[str]]:
    summary_path = analysis_dir / "summary.json"
    if not summary_path.exists():
        raise MissingInputs(f"missing {summary_path}")
    summary = json.loads(summary_path.read_text(encoding="utf-8"))
    skipped = set(summary.get("missing", {}))
    needed = [name for name in FIGURE_FILES if name not in skipped]
    absent = [name for name in needed if not (analysis_dir / name).exists()]
    if absent:
        raise MissingInputs(f"missing {', '.join(absent)} in {analysis_dir}")
    return summary, needed


def _pct(x) -> str:
    return "n/a" if x is None else f"{100 * x:6.2f}%"


def _num(x, fmt="{:12.2f}") -> str:
    return "n/a".rjust(12) if x is None else fmt.format(x)


def render(summary: dict) -> str:
    lines = ["blocksonar report", "=================", ""]
    steps = summary.get("analysis_set", {})
    if steps:
        lines.append("Analysis set")
        lines += [f"  {k:<24}{v:>10}" for k, v in steps.items()]
        lines.append("")
    counts = summary.get("class_counts", {})
    if counts:
        lines.append("Observed hashes by class")
        lines += [f"  {k:<24}{v:>10}" for k, v in counts.items()]
        lines.append("")

    bi = summary.get("block_intervals")
    lines.append("Block timing (s)              listening time  blockchain time")
    if bi:
        for key, label in (("min", "minimum"), ("max", "maximum"), ("mean", "mean"), ("variance", "variance"),
                           ("median", "median (50%)")):
            lines.append(f"  {label:<28}{_num(bi['listening_time'][key])} {_num(bi['blockchain_time'][key])}")
    else:
        lines.append("  not available")
    lines.append("")

    lines.append("Inclusion delay, exponential fit")
    for key, unit in (("delta_seconds", "s"), ("delta_blocks", "blocks")):
        fit = summary.get(key)
        if fit:
            lines.append(f"  delta ({unit}){'':<{17 - len(unit)}}{fit['delta']:12.2f}   rms log residual "
                         f"{fit['rms_log_residual']:.4f} over {fit['bins_used']} bins")
        else:
            lines.append(f"  delta ({unit}){'':<{17 - len(unit)}}{'n/a':>12}")
    lines.append("")

    fr = summary.get("fractions") or {}
    lines.append("Inclusion")
    lines.append(f"  not included after 1 h      {_pct(fr.get('not_included_at_1h'))}")
    lines.append(f"  not included after 30 days  {_pct(fr.get('not_included_at_30d'))}")
    lines.append(f"  value included after 3 h    {_pct(fr.get('value_included_at_3h'))}")
    lines.append(f"  value included after 30 days{_pct(fr.get('value_included_at_30d'))}")
    every = summary.get("fractions_observed") or {}
    if every:
        lines.append(f"  over all {every['set_size']} observed BT/UNCONFIRMED, before exclusions:")
        lines.append(f"  not included after 1 h      {_pct(every.get('not_included_at_1h'))}")
        lines.append(f"  not included after 30 days  {_pct(every.get('not_included_at_30d'))}")
    lines.append("")

    prop = summary.get("propagation") or {}
    lines.append("Propagation (mean over blocks, share of block-announcing peers)")
    lines.append(f"  reached within 1 s          {_pct(prop.get('fraction_at_1s'))}")
    lines.append(f"  reached within 10 s         {_pct(prop.get('fraction_at_10s'))}")
    lines.append("")

    lines.append("Reference values from the May 2016 live network (not reproducible, not tested)")
    lines.append(f"  {'quantity':<30}{'measured':>14}{'reference':>14}")
    for row in summary.get("comparison", []):
        m = row["measured"]
        lines.append(f"  {row['quantity']:<30}{'n/a' if m is None else f'{m:.4g}':>14}{row['reference']:>14.4g}")
    missing = summary.get("missing") or {}
    if missing:
        lines.append("")
        lines.append("Not produced")
        lines += [f"  {k}: {v}" for k, v in sorted(missing.items())]
    return "\n".join(lines) + "\n"


def _write_dat(src: Path, dst: Path) -> None:
    with open(src, newline="", encoding="ascii") as fh:
        rows = list(csv.reader(fh))
    with open(dst, "w", encoding="ascii", newline="\n") as out:
        out.write("# " + " ".join(rows[0]) + "\n")
        for row in rows[1:]:
            out.write(" ".join(row) + "\n")


def _gp_stub(stem: str, spec) -> str:
    title, xlabel, ylabel, logx, cols = spec
    plots = ", ".join(f"'{stem}.dat' using 1:{c} with linespoints title '{t}'" for c, t in cols)
    out = [
        "set terminal pngcairo size 900,540",
        f"set output '{stem}.png'",
        f"set title '{title}'",
        f"set xlabel '{xlabel}'",
        f"set ylabel '{ylabel}'",
    ]
    if logx:
        out.append("set logscale x")
    out.append(f"plot {plots}")
    return "\n".join(out) + "\n"


def write_report(analysis_dir: str | os.PathLike) -> list[Path]:
    """Write ``report.txt`` and ``plots/*.dat`` + ``plots/*.gp``; return written paths."""
    root = Path(analysis_dir)
    summary, present = required_inputs(root)
    written = []
    report = root / "report.txt"
    report.write_text(render(summary), encoding="utf-8")
    written.append(report)
    plots = root / "plots"
    plots.mkdir(exist_ok=True)
    for name in present:
        stem = name[: -len(".csv")]
        _write_dat(root / name, plots / f"{stem}.dat")
        (plots / f"{stem}.gp").write_text(_gp_stub(stem, PLOTS[name]), encoding="ascii")
        written += [plots / f"{stem}.dat", plots / f"{stem}.gp"]
    return written
