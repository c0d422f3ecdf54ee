"""Deterministic gossip-network simulator producing a ledger and a monitor log."""

from .audit import AuditReport, audit_monitor
from .config import MinerPolicy, SimConfig
from .engine import SimBlock, SimResult, run
from .topology import build_topology, peer_name

__all__ = [
    "AuditReport",
    "MinerPolicy",
    "SimBlock",
    "SimConfig",
    "SimResult",
    "audit_monitor",
    "build_topology",
    "peer_name",
    "run",
]
