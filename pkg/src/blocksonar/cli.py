"""
Command-line entry point::

    blocksonar simulate --config sim.ini --out run1
    blocksonar classify --log run1/events.csv --ledger run1/ledger.jsonl --out run1
    blocksonar analyze  --log run1/events.csv --ledger run1/ledger.jsonl --out run1
    blocksonar report   --out run1
    blocksonar monitor  --config monitor.ini --out live

Every subcommand writes ``run_manifest.json`` into its output directory
(``--out``, else ``$BLOCKSONAR_OUT``, else ``./blocksonar-out``).
"""

from __future__ import annotations

import argparse
import asyncio
import configparser
import json
import logging
import os
import signal
import sys
import tempfile
import time
from pathlib import Path

from . import __version__
from .analytics import FIGURE_FILES, analyze
from .chainview import ChainView
from .classify import (
    Classification,
    Classifier,
    ListeningWindow,
    classify_all,
    read_classification,
    summary_lines,
    write_classification,
)
from .crawler import Crawler, CrawlerConfig, PeerState
from .errors import BlocksonarError, ConfigInvalid, NoSeeds, ParseError
from .eventlog import EventIndex, EventLogWriter
from .report import write_report
from .sim import SimConfig, run as sim_run
from .wire import MAINNET_MAGIC, SIM_MAGIC

log = logging.getLogger("blocksonar")

DEFAULT_OUT = "blocksonar-out"


def _now_ms() -> int:
    return time.time_ns() // 1_000_000


class Manifest:
    def __init__(self, args: argparse.Namespace, out: Path):
        self.out = out
        self.data = {
            "subcommand": args.command,
            "config": getattr(args, "config", None),
            "inputs": {k: getattr(args, k, None) for k in ("log", "ledger", "classification") if getattr(args, k, None)},
            "output_dir": str(out),
            "tool_version": __version__,
            "rng_seed": getattr(args, "seed", None),
            "started_utc_ms": _now_ms(),
            "ended_utc_ms": None,
            "status": "ok",
            "outputs": [],
        }

    def add(self, *paths: Path) -> None:
        for p in paths:
            self.data["outputs"].append(str(p))

    def write(self) -> Path:
        self.data["ended_utc_ms"] = _now_ms()
        missing = [p for p in self.data["outputs"] if not Path(p).exists()]
        if missing:
            raise BlocksonarError(f"manifest lists missing outputs: {missing}")
        path = self.out / "run_manifest.json"
        fd, tmp = tempfile.mkstemp(dir=self.out, prefix=".manifest-", suffix=".json")
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(self.data, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)
        return path


def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get("BLOCKSONAR_OUT") or DEFAULT_OUT)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- simulate -----------------------------------------------------------------


def cmd_simulate(args, out: Path, manifest: Manifest) -> int:
    cfg = SimConfig.from_ini(args.config) if args.config else SimConfig()
    if args.seed is not None:
        cfg = cfg.replace(rng_seed=args.seed)
    manifest.data["rng_seed"] = cfg.rng_seed
    result = sim_run(cfg)
    paths = result.write(out)
    cfg_path = out / "sim_config.ini"
    cfg_path.write_text(cfg.to_ini(), encoding="utf-8")
    manifest.add(*paths.values(), cfg_path)
    manifest.data["window"] = {"start_ms": result.start_ms, "end_ms": result.end_ms}
    c = result.conservation
    print(f"simulated {len(result.blocks)} blocks, {len(result.txids)} transactions, {len(result.events)} events")
    print(f"conservation: included {c['included']} + skipped {c['policy_skipped']} + mempool {c['mempool']}"
          f" = {c['generated']} generated ({'ok' if c['balanced'] else 'MISMATCH'})")
    return 0 if c["balanced"] else 1


# -- classify -----------------------------------------------------------------


def _load(args) -> tuple[ChainView, EventIndex]:
    if not args.log or not args.ledger:
        raise ConfigInvalid("--log and --ledger are required")
    chain = ChainView.load(args.ledger)
    try:
        index = EventIndex.open(args.log)
    except ValueError as err:
        raise ParseError(str(err)) from None
    return chain, index


def _window(args, index: EventIndex) -> ListeningWindow:
    span = ListeningWindow.covering(index)
    start = args.window_start_ms if args.window_start_ms is not None else span.start_ms
    end = args.window_end_ms if args.window_end_ms is not None else span.end_ms
    try:
        return ListeningWindow(start, end)
    except ValueError as err:
        raise ConfigInvalid(str(err)) from None


def cmd_classify(args, out: Path, manifest: Manifest) -> int:
    chain, index = _load(args)
    window = _window(args, index)
    cls = classify_all(chain, index, window, args.horizon_ms)
    path = out / "classification.csv"
    write_classification(path, cls)
    manifest.add(path)
    manifest.data["window"] = {"start_ms": window.start_ms, "end_ms": window.end_ms}
    for line in summary_lines(cls):
        print(line)
    span = index.span()
    if span is not None and (span[1] < window.start_ms or span[0] >= window.end_ms):
        print("note: listening window lies outside the log span; no block can be MDLB")
    if cls.errors:
        print(f"note: {len(cls.errors)} observed blocks are unknown to the ledger")
    return 0


# -- analyze ------------------------------------------------------------------


def _classification_for(args, out: Path, chain: ChainView, index: EventIndex) -> Classification:
    path = Path(args.classification) if args.classification else out / "classification.csv"
    if path.exists():
        cls = read_classification(path)
        if args.horizon_ms is not None:
            # the horizon may differ from the one used at classify time; re-derive tx labels
            clf = Classifier(chain, index, ListeningWindow.covering(index), args.horizon_ms)
            for h, kind in cls.kinds.items():
                if kind == "tx":
                    cls.labels[h] = clf.tx(h).value
        return cls
    return classify_all(chain, index, _window(args, index), args.horizon_ms)


def cmd_analyze(args, out: Path, manifest: Manifest) -> int:
    chain, index = _load(args)
    cls = _classification_for(args, out, chain, index)
    summary = analyze(chain, index, cls, out, horizon_ms=args.horizon_ms, bin_width_s=args.bin_width_s,
                      bin_width_blocks=args.bin_width_blocks)
    manifest.add(*(out / name for name in FIGURE_FILES if (out / name).exists()), out / "summary.json")
    for name, why in sorted(summary["missing"].items()):
        print(f"not produced: {name}: {why}")
    fr = summary.get("fractions")
    if fr:
        print(f"not included after 1 h: {fr['not_included_at_1h']:.4f}; after 30 days: {fr['not_included_at_30d']:.4f}")
    return 0


# -- report -------------------------------------------------------------------


def cmd_report(args, out: Path, manifest: Manifest) -> int:
    analysis = Path(args.analysis_dir) if args.analysis_dir else out
    written = write_report(analysis)
    manifest.add(*written)
    print((analysis / "report.txt").read_text(encoding="utf-8"), end="")
    return 0


# -- monitor ------------------------------------------------------------------


def load_monitor_config(path: str | None) -> tuple[CrawlerConfig, float, float]:
    """``[crawler]`` section -> (config, duration_s, seed_timeout_s)."""
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except (OSError, configparser.Error) as err:
            raise ConfigInvalid(f"{path}: {err}") from None
    sec = parser["crawler"] if parser.has_section("crawler") else {}
    ints = ("max_connections", "handshake_timeout_ms", "connect_timeout_ms", "reconnect_backoff_base_ms",
            "reconnect_backoff_cap_ms", "getaddr_interval_ms", "ban_after_failures")
    kw: dict = {}
    try:
        for key in ints:
            if key in sec:
                kw[key] = int(sec[key])
        seeds = [s.strip() for s in sec.get("seeds", "").split(",") if s.strip()]
        magic = sec.get("magic", "mainnet")
        kw["magic"] = {"mainnet": MAINNET_MAGIC, "sim": SIM_MAGIC}.get(magic) or bytes.fromhex(magic)
        if len(kw["magic"]) != 4:
            raise ValueError("magic must be 4 bytes")
        if sec.get("listen_address"):
            kw["listen_address"] = sec["listen_address"]
        duration = float(sec.get("duration_s", "0"))
        seed_timeout = float(sec.get("seed_timeout_s", "30"))
        return CrawlerConfig(seeds=seeds, **kw), duration, seed_timeout
    except ValueError as err:
        raise ConfigInvalid(f"{path}: {err}") from None


async def _monitor(cfg: CrawlerConfig, writer: EventLogWriter, duration: float, seed_timeout: float) -> str:
    loop = asyncio.get_running_loop()
    stop = asyncio.Event()
    interrupted = False

    def on_signal():
        nonlocal interrupted
        interrupted = True
        stop.set()

    for sig in (signal.SIGINT, signal.SIGTERM):
        loop.add_signal_handler(sig, on_signal)
    crawler = Crawler(cfg, writer.extend)
    await crawler.start()
    started = loop.time()
    ever_up = False
    try:
        while not stop.is_set():
            try:
                await asyncio.wait_for(stop.wait(), timeout=1.0)
            except asyncio.TimeoutError:
                pass
            writer.flush()
            if crawler.established():
                ever_up = True
            elif not ever_up:
                seeds_done = all(e.state in (PeerState.FAILED, PeerState.BANNED) for e in crawler.directory.values())
                if seeds_done or loop.time() - started > seed_timeout:
                    raise NoSeeds("no seed could be reached")
            if duration and loop.time() - started >= duration:
                break
    finally:
        await crawler.stop()
        writer.flush()
        for sig in (signal.SIGINT, signal.SIGTERM):
            loop.remove_signal_handler(sig)
    log.info("monitor: %d events, %d peers known", crawler.events_seen, len(crawler.directory))
    return "interrupted" if interrupted else "ok"


def cmd_monitor(args, out: Path, manifest: Manifest) -> int:
    cfg, duration, seed_timeout = load_monitor_config(args.config)
    if not cfg.seeds:
        raise NoSeeds("no seeds in [crawler] seeds")
    log_path = Path(args.log) if args.log else out / "events.csv"
    with EventLogWriter(log_path) as writer:
        status = asyncio.run(_monitor(cfg, writer, duration, seed_timeout))
    manifest.data["status"] = status
    manifest.add(log_path)
    print(f"monitor {status}; log at {log_path}")
    return 0


COMMANDS = {
    "monitor": cmd_monitor,
    "simulate": cmd_simulate,
    "classify": cmd_classify,
    "analyze": cmd_analyze,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="blocksonar", description="Passive gossip monitor and inclusion-delay analysis")
    p.add_argument("--version", action="version", version=f"blocksonar {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--out", help="output directory (default $BLOCKSONAR_OUT or ./blocksonar-out)")

    sp = sub.add_parser("monitor", help="listen to a live or simulated network")
    common(sp)
    sp.add_argument("--config", help="INI file with a [crawler] section")
    sp.add_argument("--log", help="event log path (default OUT/events.csv)")

    sp = sub.add_parser("simulate", help="run the network simulator")
    common(sp)
    sp.add_argument("--config", help="simulator INI file")
    sp.add_argument("--seed", type=int, help="override rng_seed")

    for name, help_ in (("classify", "label every observed hash"), ("analyze", "compute every figure")):
        sp = sub.add_parser(name, help=help_)
        common(sp)
        sp.add_argument("--log", required=True)
        sp.add_argument("--ledger", required=True)
        sp.add_argument("--window-start-ms", type=int)
        sp.add_argument("--window-end-ms", type=int)
        sp.add_argument("--horizon-ms", type=int)
        if name == "analyze":
            sp.add_argument("--classification", help="classification.csv (default OUT/classification.csv)")
            sp.add_argument("--bin-width-s", type=float, default=600.0)
            sp.add_argument("--bin-width-blocks", type=float, default=1.0)

    sp = sub.add_parser("report", help="render report.txt and gnuplot files")
    common(sp)
    sp.add_argument("analysis_dir", nargs="?", help="analysis directory (default OUT)")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        out = _out_dir(args)
        manifest = Manifest(args, out)
        code = COMMANDS[args.command](args, out, manifest)
        manifest.write()
        return code
    except BlocksonarError as err:
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 1
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
