"""
Simulator configuration, read from an INI file::

    [sim]
    rng_seed = 7
    peer_count = 50
    topology = random-regular      ; or erdos-renyi
    degree = 4
    latency = constant             ; constant | uniform | exponential
    latency_ms = 50

    [policy]
    kind = SKIP_PROB               ; INCLUDE_ALL | VALUE_THRESHOLD | SKIP_PROB
    skip_prob = 0.2

    [inject]
    fork_prob = 0.05

Unknown keys are rejected so typos do not silently fall back to defaults.
"""

from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field, fields

from ..errors import ConfigInvalid

DEFAULT_START_MS = 1_462_324_845_000  # 2016-05-04T01:20:45Z

TOPOLOGIES = ("random-regular", "erdos-renyi")
LATENCY_MODELS = ("constant", "uniform", "exponential")
INTERVAL_MODELS = ("exponential", "fixed")
MONITOR_MODES = ("in-process", "loopback")
POLICY_KINDS = ("INCLUDE_ALL", "VALUE_THRESHOLD", "SKIP_PROB")


@dataclass(frozen=True)
class MinerPolicy:
    kind: str = "INCLUDE_ALL"
    threshold_sats: int = 0
    skip_prob: float = 0.0
    # SKIP_PROB applies only to values below this bound when set
    skip_below_sats: int | None = None
    max_block_txs: int = 0  # 0 = unlimited

    def validate(self) -> None:
        if self.kind not in POLICY_KINDS:
            raise ConfigInvalid(f"unknown policy kind {self.kind!r}")
        if not 0.0 <= self.skip_prob <= 1.0:
            raise ConfigInvalid(f"skip_prob {self.skip_prob} outside [0, 1]")
        if self.threshold_sats < 0 or self.max_block_txs < 0:
            raise ConfigInvalid("threshold_sats and max_block_txs must be >= 0")

    def skip_probability(self, value_sats: int) -> float:
        if self.kind != "SKIP_PROB":
            return 0.0
        if self.skip_below_sats is not None and value_sats >= self.skip_below_sats:
            return 0.0
        return self.skip_prob


@dataclass(frozen=True)
class SimConfig:
    rng_seed: int = 1
    peer_count: int = 50
    topology: str = "random-regular"
    degree: int = 4
    edge_prob: float = 0.1
    max_topology_retries: int = 20
    latency: str = "constant"
    latency_ms: int = 50
    latency_min_ms: int = 10
    latency_max_ms: int = 100
    latency_mean_ms: float = 50.0
    block_interval_mean_ms: int = 2000
    block_interval_model: str = "exponential"
    block_count: int = 100
    tail_ms: int | None = None  # listening continues this long after the last block
    tx_rate_per_s: float = 25.0
    tx_cutoff_ms: int = 0  # no new transactions this close to the end
    value_min_sats: int = 1_000
    value_max_sats: int = 10_000_000_000
    fee_min_sats: int = 0
    fee_max_sats: int = 50_000
    miner_count: int = 10
    start_ms: int = DEFAULT_START_MS
    prehistory_blocks: int = 1
    time_jitter_ms: int = 0
    monitor_mode: str = "in-process"
    loopback_speed: float = 1.0
    policy: MinerPolicy = field(default_factory=MinerPolicy)
    # injection
    fork_prob: float = 0.0
    race_window_ms: int = 500
    invalid_block_prob: float = 0.0
    invalid_tx_frac: float = 0.0
    echo_tx_frac: float = 0.0
    echo_delay_ms: int = 1
    echo_blocks: int = 0
    locktime_frac: float = 0.0

    @property
    def end_tail_ms(self) -> int:
        return self.block_interval_mean_ms if self.tail_ms is None else self.tail_ms

    def validate(self) -> "SimConfig":
        def need(cond, msg):
            if not cond:
                raise ConfigInvalid(msg)

        need(self.peer_count >= 2, "peer_count must be >= 2")
        need(self.topology in TOPOLOGIES, f"topology must be one of {TOPOLOGIES}")
        need(self.degree >= 1, "degree must be >= 1")
        need(0.0 < self.edge_prob <= 1.0, "edge_prob must be in (0, 1]")
        need(self.max_topology_retries >= 1, "max_topology_retries must be >= 1")
        need(self.latency in LATENCY_MODELS, f"latency must be one of {LATENCY_MODELS}")
        need(self.latency_ms >= 0, "latency_ms must be >= 0")
        need(0 <= self.latency_min_ms <= self.latency_max_ms, "need 0 <= latency_min_ms <= latency_max_ms")
        need(self.latency_mean_ms >= 0, "latency_mean_ms must be >= 0")
        need(self.block_interval_mean_ms >= 1, "block_interval_mean_ms must be >= 1")
        need(self.block_interval_model in INTERVAL_MODELS, f"block_interval_model must be one of {INTERVAL_MODELS}")
        need(self.block_count >= 1, "block_count must be >= 1")
        need(self.end_tail_ms >= 0 and self.tx_cutoff_ms >= 0, "tail_ms and tx_cutoff_ms must be >= 0")
        need(self.tx_rate_per_s >= 0, "tx_rate_per_s must be >= 0")
        need(1 <= self.value_min_sats <= self.value_max_sats, "need 1 <= value_min_sats <= value_max_sats")
        need(0 <= self.fee_min_sats <= self.fee_max_sats, "need 0 <= fee_min_sats <= fee_max_sats")
        need(1 <= self.miner_count <= self.peer_count, "miner_count must be in [1, peer_count]")
        need(self.prehistory_blocks >= 1, "prehistory_blocks must be >= 1 (genesis)")
        need(0 <= self.echo_blocks <= self.prehistory_blocks, "echo_blocks must be in [0, prehistory_blocks]")
        need(self.time_jitter_ms >= 0 and self.echo_delay_ms >= 0, "jitter and echo delay must be >= 0")
        need(self.race_window_ms >= 1, "race_window_ms must be >= 1")
        need(self.monitor_mode in MONITOR_MODES, f"monitor_mode must be one of {MONITOR_MODES}")
        need(self.loopback_speed > 0, "loopback_speed must be > 0")
        for name in ("fork_prob", "invalid_block_prob", "invalid_tx_frac", "echo_tx_frac", "locktime_frac"):
            need(0.0 <= getattr(self, name) <= 1.0, f"{name} must be in [0, 1]")
        need(self.fork_prob == 0 or self.miner_count >= 2, "forks need at least two miners")
        self.policy.validate()
        return self

    def replace(self, **changes) -> "SimConfig":
        return dataclasses.replace(self, **changes).validate()

    # -- INI -------------------------------------------------------------------

    @classmethod
    def from_ini(cls, path: str | os.PathLike) -> "SimConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as err:
            raise ConfigInvalid(f"{path}: {err}") from err
        return cls.from_string(text, source=str(path))

    @classmethod
    def from_string(cls, text: str, source: str = "<config>") -> "SimConfig":
        parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
        try:
            parser.read_string(text, source=source)
        except configparser.Error as err:
            raise ConfigInvalid(f"{source}: {err}") from None
        unknown_sections = set(parser.sections()) - {"sim", "policy", "inject"}
        if unknown_sections:
            raise ConfigInvalid(f"{source}: unknown sections {sorted(unknown_sections)}")
        sim_fields = {f.name: f for f in fields(cls) if f.name != "policy"}
        policy_fields = {f.name: f for f in fields(MinerPolicy)}
        kwargs, pkw = {}, {}
        for section in ("sim", "inject"):
            if parser.has_section(section):
                for key, raw in parser.items(section):
                    if key not in sim_fields:
                        raise ConfigInvalid(f"{source}: unknown key [{section}] {key}")
                    kwargs[key] = _convert(sim_fields[key], raw, source)
        if parser.has_section("policy"):
            for key, raw in parser.items("policy"):
                if key not in policy_fields:
                    raise ConfigInvalid(f"{source}: unknown key [policy] {key}")
                pkw[key] = _convert(policy_fields[key], raw, source)
        return cls(**kwargs, policy=MinerPolicy(**pkw)).validate()

    def to_ini(self) -> str:
        inject = {"fork_prob", "race_window_ms", "invalid_block_prob", "invalid_tx_frac", "echo_tx_frac",
                  "echo_delay_ms", "echo_blocks", "locktime_frac"}
        lines = ["[sim]"]
        for f in fields(self):
            if f.name not in inject and f.name != "policy" and getattr(self, f.name) is not None:
                lines.append(f"{f.name} = {getattr(self, f.name)}")
        lines.append("\n[policy]")
        for f in fields(self.policy):
            if getattr(self.policy, f.name) is not None:
                lines.append(f"{f.name} = {getattr(self.policy, f.name)}")
        lines.append("\n[inject]")
        lines += [f"{name} = {getattr(self, name)}" for name in sorted(inject)]
        return "\n".join(lines) + "\n"


def _convert(f, raw: str, source: str):
    kind = str(f.type)
    try:
        if "int" in kind:
            return int(raw.replace("_", ""))
        if "float" in kind:
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigInvalid(f"{source}: bad value for {f.name}: {raw!r}") from None
