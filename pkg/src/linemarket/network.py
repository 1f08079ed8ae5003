"""Capacitated rail network, line pools, and routing incidence.

A network is a directed graph whose edges carry train capacities.  A line is
a directed path in that graph, and a pool system records which line each
operator runs inside each line pool.  All structures here are immutable
after construction; the engines compile them into dense per-pool views.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

__all__ = [
    "InputMismatchError",
    "Edge",
    "Network",
    "Line",
    "PoolSystem",
    "EdgeLoad",
    "Violation",
    "validate_network",
    "edge_loads",
    "path_price",
    "PoolView",
    "compile_pool",
    "network_from_json",
    "network_to_json",
    "load_network_file",
    "dump_network_file",
]


class InputMismatchError(ValueError):
    """An input is keyed inconsistently with the network or pool system."""


@dataclass(frozen=True)
class Edge:
    id: str
    tail: str
    head: str
    capacity: float


class Network:
    """Directed graph with per-edge capacities.

    Edge order is the construction order; every per-edge vector produced by
    this module is aligned with it.
    """

    def __init__(self, nodes: Iterable[str], edges: Iterable[Edge]) -> None:
        self.nodes = frozenset(nodes)
        self.edges = tuple(edges)
        self._by_id: dict[str, Edge] = {}
        for e in self.edges:
            # first occurrence wins; duplicates are reported by validate_network
            self._by_id.setdefault(e.id, e)

    @property
    def edge_ids(self) -> tuple[str, ...]:
        return tuple(e.id for e in self.edges)

    def has_edge(self, edge_id: str) -> bool:
        return edge_id in self._by_id

    def edge(self, edge_id: str) -> Edge:
        try:
            return self._by_id[edge_id]
        except KeyError:
            raise InputMismatchError(f"unknown edge {edge_id!r}") from None

    def capacity(self, edge_id: str) -> float:
        return self.edge(edge_id).capacity

    def capacity_vector(self) -> np.ndarray:
        return np.array([e.capacity for e in self.edges], dtype=float)

    def with_capacities(self, new_caps: Mapping[str, float]) -> "Network":
        """Copy of the network with selected edge capacities replaced."""
        unknown = set(new_caps) - set(self._by_id)
        if unknown:
            raise InputMismatchError(f"unknown edges in capacity update: {sorted(unknown)}")
        edges = [
            Edge(e.id, e.tail, e.head, float(new_caps.get(e.id, e.capacity)))
            for e in self.edges
        ]
        return Network(self.nodes, edges)

    def __repr__(self) -> str:
        return f"Network(nodes={len(self.nodes)}, edges={len(self.edges)})"


@dataclass(frozen=True)
class Line:
    """A directed path, stored as the ordered tuple of edge ids."""

    edge_ids: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.edge_ids)


class PoolSystem:
    """Which line each operator runs in each pool.

    Keys are (operator id, pool id).  An operator participates in a pool iff
    the pair is present; participation with more than one line per pool is
    impossible by construction.
    """

    def __init__(self, pool_ids: Iterable[str], lines: Mapping[tuple[str, str], Line]) -> None:
        self.pool_ids = tuple(pool_ids)
        self.lines = dict(lines)
        self.lop_ids = tuple(sorted({lop for lop, _ in self.lines}))

    def pairs(self) -> tuple[tuple[str, str], ...]:
        return tuple(sorted(self.lines))

    def lops_in(self, pool_id: str) -> tuple[str, ...]:
        return tuple(sorted(lop for lop, k in self.lines if k == pool_id))

    def line(self, lop: str, pool_id: str) -> Line:
        try:
            return self.lines[(lop, pool_id)]
        except KeyError:
            raise InputMismatchError(f"no line for operator {lop!r} in pool {pool_id!r}") from None

    def __repr__(self) -> str:
        return f"PoolSystem(pools={len(self.pool_ids)}, lines={len(self.lines)})"


@dataclass(frozen=True)
class Violation:
    """One structural defect found by validate_network."""

    kind: str
    subject: str
    detail: str = ""

    def __str__(self) -> str:
        msg = f"{self.kind}: {self.subject}"
        return f"{msg} ({self.detail})" if self.detail else msg


def validate_network(net: Network, pools: PoolSystem) -> list[Violation]:
    """Check structural invariants; returns an empty list when sound.

    Flags duplicate edge ids, dangling endpoints, nonpositive capacities,
    lines that are empty, reference unknown edges, repeat an edge, or fail
    to chain head-to-tail, and lines filed under unknown pools.
    """
    out: list[Violation] = []
    seen: set[str] = set()
    for e in net.edges:
        if e.id in seen:
            out.append(Violation("duplicate-edge", e.id))
        seen.add(e.id)
        for node in (e.tail, e.head):
            if node not in net.nodes:
                out.append(Violation("unknown-node", node, f"edge {e.id}"))
        if not e.capacity > 0:
            out.append(Violation("nonpositive-capacity", e.id, f"capacity={e.capacity}"))

    known_pools = set(pools.pool_ids)
    for (lop, k), line in sorted(pools.lines.items()):
        where = f"line ({lop}, {k})"
        if k not in known_pools:
            out.append(Violation("unknown-pool", k, where))
        if len(line) == 0:
            out.append(Violation("empty-line", where))
            continue
        missing = [eid for eid in line.edge_ids if not net.has_edge(eid)]
        if missing:
            out.append(Violation("unknown-edge", ",".join(missing), where))
            continue
        if len(set(line.edge_ids)) != len(line.edge_ids):
            out.append(Violation("repeated-edge", where))
        for a, b in zip(line.edge_ids, line.edge_ids[1:]):
            if net.edge(a).head != net.edge(b).tail:
                out.append(Violation("broken-path", where, f"{a} !-> {b}"))
    return out


class EdgeLoad:
    """Per-(edge, pool) traffic implied by a frequency assignment.

    Only touched pairs are stored; load() returns 0.0 for every edge a pool
    does not use.
    """

    def __init__(self, values: Mapping[tuple[str, str], float]) -> None:
        self._values = dict(values)

    def load(self, edge_id: str, pool_id: str) -> float:
        return self._values.get((edge_id, pool_id), 0.0)

    def items(self):
        return self._values.items()

    def __len__(self) -> int:
        return len(self._values)


def edge_loads(pools: PoolSystem, freqs: Mapping[tuple[str, str], float]) -> EdgeLoad:
    """Aggregate operator frequencies into per-(edge, pool) loads.

    freqs is keyed by (operator, pool); pairs absent from the pool system are
    rejected, pairs absent from freqs contribute nothing.
    """
    extra = set(freqs) - set(pools.lines)
    if extra:
        raise InputMismatchError(f"frequencies for unknown (operator, pool) pairs: {sorted(extra)}")
    acc: dict[tuple[str, str], float] = {}
    for (lop, k), x in freqs.items():
        for eid in pools.lines[(lop, k)].edge_ids:
            key = (eid, k)
            acc[key] = acc.get(key, 0.0) + float(x)
    return EdgeLoad(acc)


def path_price(
    pools: PoolSystem, prices: Mapping[tuple[str, str], float], lop: str, pool_id: str
) -> float:
    """Sum of edge prices along one operator's line in one pool."""
    line = pools.line(lop, pool_id)
    return float(sum(prices.get((eid, pool_id), 0.0) for eid in line.edge_ids))


# ---------------------------------------------------------------------------
# Compiled per-pool view used by the engines and the reference solver.

@dataclass(frozen=True)
class PoolView:
    """Dense numeric view of one pool against a fixed edge ordering.

    incidence[e, p] is 1.0 when operator p's line uses edge e.  bottleneck[p]
    is the smallest raw capacity along p's line (scale by the pool's capacity
    share to get the physical frequency ceiling).
    """

    pool_id: str
    edge_ids: tuple[str, ...]
    capacity: np.ndarray
    lop_ids: tuple[str, ...]
    incidence: np.ndarray
    line_edge_idx: tuple[np.ndarray, ...]

    @property
    def n_edges(self) -> int:
        return len(self.edge_ids)

    @property
    def n_lops(self) -> int:
        return len(self.lop_ids)

    @property
    def bottleneck(self) -> np.ndarray:
        if self.n_lops == 0:
            return np.zeros(0)
        return np.array([self.capacity[idx].min() for idx in self.line_edge_idx])

    def lines_per_edge(self) -> np.ndarray:
        return self.incidence.sum(axis=1)


def compile_pool(net: Network, pools: PoolSystem, pool_id: str) -> PoolView:
    """Build the dense incidence view of one pool."""
    if pool_id not in pools.pool_ids:
        raise InputMismatchError(f"unknown pool {pool_id!r}")
    edge_ids = net.edge_ids
    pos = {eid: i for i, eid in enumerate(edge_ids)}
    lops = pools.lops_in(pool_id)
    inc = np.zeros((len(edge_ids), len(lops)))
    idx_per_lop = []
    for p, lop in enumerate(lops):
        line = pools.line(lop, pool_id)
        try:
            idx = np.array([pos[eid] for eid in line.edge_ids], dtype=int)
        except KeyError as err:
            raise InputMismatchError(f"line ({lop}, {pool_id}) uses unknown edge {err}") from None
        inc[idx, p] = 1.0
        idx_per_lop.append(idx)
    return PoolView(
        pool_id=pool_id,
        edge_ids=edge_ids,
        capacity=net.capacity_vector(),
        lop_ids=lops,
        incidence=inc,
        line_edge_idx=tuple(idx_per_lop),
    )


# ---------------------------------------------------------------------------
# JSON round trip.

def network_from_json(doc: Mapping) -> tuple[Network, PoolSystem]:
    """Parse the network document format.

    Expected shape::

        {"nodes": [...],
         "edges": [{"id", "tail", "head", "capacity"}, ...],
         "pools": [{"id", "lines": [{"lop", "edges": [...]}, ...]}, ...]}
    """
    try:
        nodes = [str(n) for n in doc["nodes"]]
        edges = [
            Edge(str(e["id"]), str(e["tail"]), str(e["head"]), float(e["capacity"]))
            for e in doc["edges"]
        ]
        pool_ids = [str(p["id"]) for p in doc["pools"]]
        lines: dict[tuple[str, str], Line] = {}
        for p in doc["pools"]:
            for entry in p["lines"]:
                key = (str(entry["lop"]), str(p["id"]))
                if key in lines:
                    raise ValueError(f"duplicate line for {key}")
                lines[key] = Line(tuple(str(eid) for eid in entry["edges"]))
    except (KeyError, TypeError) as err:
        raise ValueError(f"malformed network document: missing or bad field {err}") from None
    return Network(nodes, edges), PoolSystem(pool_ids, lines)


def network_to_json(net: Network, pools: PoolSystem) -> dict:
    return {
        "nodes": sorted(net.nodes),
        "edges": [
            {"id": e.id, "tail": e.tail, "head": e.head, "capacity": e.capacity}
            for e in net.edges
        ],
        "pools": [
            {
                "id": k,
                "lines": [
                    {"lop": lop, "edges": list(pools.line(lop, k).edge_ids)}
                    for lop in pools.lops_in(k)
                ],
            }
            for k in pools.pool_ids
        ],
    }


def load_network_file(path: str | Path) -> tuple[Network, PoolSystem]:
    with open(path, encoding="utf-8") as fh:
        return network_from_json(json.load(fh))


def dump_network_file(net: Network, pools: PoolSystem, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(network_to_json(net, pools), fh, indent=2, sort_keys=True)
        fh.write("\n")
