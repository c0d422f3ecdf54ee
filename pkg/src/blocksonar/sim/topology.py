"""Peer graph construction and per-link latencies."""

from __future__ import annotations

import networkx as nx
import numpy as np

from ..errors import ConfigInvalid, DisconnectedAfterRetries
from .config import SimConfig


def peer_name(i: int) -> str:
    return f"10.0.{i // 250}.{i % 250 + 1}:8333"


def build_topology(config: SimConfig, rng: np.random.Generator | None = None) -> nx.Graph:
    """Connected undirected graph on ``range(peer_count)``.

    Random-regular degree is capped at ``peer_count - 1`` so tiny networks
    stay buildable (2 peers always give a single edge).
    """
    rng = rng if rng is not None else np.random.default_rng([config.rng_seed, 0])
    n = config.peer_count
    d = min(config.degree, n - 1)
    if config.topology == "random-regular" and (n * d) % 2:
        raise ConfigInvalid(f"random-regular({d}) needs peer_count * degree even, got {n}")
    for _ in range(config.max_topology_retries):
        seed = int(rng.integers(2**31))
        if config.topology == "random-regular":
            g = nx.random_regular_graph(d, n, seed=seed)
        else:
            g = nx.gnp_random_graph(n, config.edge_prob, seed=seed)
        if nx.is_connected(g):
            return nx.Graph(sorted(tuple(sorted(e)) for e in g.edges()))
    raise DisconnectedAfterRetries(f"no connected {config.topology} graph after {config.max_topology_retries} tries")


def assign_latencies(g: nx.Graph, config: SimConfig, rng: np.random.Generator) -> None:
    """Store an integer ``latency`` (ms) on every edge, drawn once per link."""
    edges = sorted(tuple(sorted(e)) for e in g.edges())
    if config.latency == "constant":
        lat = np.full(len(edges), config.latency_ms, dtype=np.int64)
    elif config.latency == "uniform":
        lat = rng.integers(config.latency_min_ms, config.latency_max_ms + 1, size=len(edges))
    else:
        lat = np.rint(rng.exponential(config.latency_mean_ms, size=len(edges))).astype(np.int64)
    for (u, v), ms in zip(edges, lat):
        g.edges[u, v]["latency"] = int(ms)


def distance_matrix(g: nx.Graph) -> np.ndarray:
    """All-pairs shortest-path delay in ms (first arrival under flooding)."""
    n = g.number_of_nodes()
    dist = np.zeros((n, n), dtype=np.int64)
    for src, lengths in nx.all_pairs_dijkstra_path_length(g, weight="latency"):
        for dst, ms in lengths.items():
            dist[src, dst] = ms
    return dist


def eccentricity_hops(g: nx.Graph) -> dict[int, int]:
    return nx.eccentricity(g)
