"""Reproducible experiment instances: grids, disruptions, recovery runs.

Instances live on rows x cols lattice digraphs with rightward and downward
edges.  Every line is a seeded monotone lattice path opening with a common
first edge, so pools compete hardest near the shared throat.  Disruptions
rescale capacities on already congested edges; recovery experiments measure
how much cheaper it is to restart the mechanism warm than cold after such a
hit.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from .network import Edge, Line, Network, PoolSystem
from .multi_pool import MechanismConfig, MechanismResult, OuterState, run_mechanism
from .oracle import mechanism_kkt
from .utility import UtilitySpec, UtilityTable

__all__ = [
    "GridSpec",
    "generate_grid",
    "perturb_pool",
    "uniform_utilities",
    "pool_scaled_utilities",
    "DisruptionSpec",
    "congested_edges",
    "apply_disruption",
    "ExperimentRecord",
    "RecoveryResult",
    "run_recovery_experiment",
    "child_seed",
]


def child_seed(root: int, tag: str) -> int:
    """Deterministic per-component seed derived from one root seed."""
    return int(np.random.SeedSequence([root, zlib.crc32(tag.encode())]).generate_state(1)[0])


def _node(r: int, c: int) -> str:
    return f"{r},{c}"


def _edge_id(tail: str, head: str) -> str:
    return f"{tail}->{head}"


@dataclass(frozen=True)
class GridSpec:
    """Lattice instance recipe.

    Lines run from the head of shared_first_edge by rightward/downward moves
    to a random interior target, so every generated line starts with the
    same edge and has at least min_line_len edges.
    """

    rows: int
    cols: int
    pools: int
    lines_per_pool: int
    capacity_range: tuple[float, float] = (10.0, 110.0)
    shared_first_edge: tuple[tuple[int, int], tuple[int, int]] = ((0, 3), (1, 3))
    min_line_len: int = 3
    seed: int = 0

    def __post_init__(self) -> None:
        if self.rows < 2 or self.cols < 2:
            raise ValueError("grid needs at least 2 rows and 2 cols")
        if self.pools < 1 or self.lines_per_pool < 1:
            raise ValueError("need at least one pool and one line per pool")
        lo, hi = self.capacity_range
        if not (0 < lo < hi):
            raise ValueError(f"bad capacity range {self.capacity_range}")
        (r0, c0), (r1, c1) = self.shared_first_edge
        down = (r1 == r0 + 1 and c1 == c0)
        right = (r1 == r0 and c1 == c0 + 1)
        inside = 0 <= r0 < self.rows and 0 <= r1 < self.rows and 0 <= c0 < self.cols and 0 <= c1 < self.cols
        if not (inside and (down or right)):
            raise ValueError(f"shared first edge {self.shared_first_edge} is not a grid move")
        if self.min_line_len < 2:
            raise ValueError("lines must have at least two edges")


def _grid_edges(rows: int, cols: int) -> list[tuple[str, str]]:
    out = []
    for r in range(rows):
        for c in range(cols):
            if c + 1 < cols:
                out.append((_node(r, c), _node(r, c + 1)))
            if r + 1 < rows:
                out.append((_node(r, c), _node(r + 1, c)))
    return out


def _monotone_path(spec: GridSpec, rng: np.random.Generator) -> Line:
    """Random rightward/downward path opening with the shared first edge."""
    (r0, c0), (r1, c1) = spec.shared_first_edge
    first = _edge_id(_node(r0, c0), _node(r1, c1))
    need = spec.min_line_len - 1  # edges after the shared one
    for _ in range(10_000):
        rt = int(rng.integers(r1, spec.rows))
        ct = int(rng.integers(c1, spec.cols))
        if (rt - r1) + (ct - c1) >= need:
            break
    else:
        raise ValueError("grid too small for the requested line length")
    moves = ["D"] * (rt - r1) + ["R"] * (ct - c1)
    perm = rng.permutation(len(moves))
    r, c = r1, c1
    edges = [first]
    for i in perm:
        if moves[i] == "D":
            nr, nc = r + 1, c
        else:
            nr, nc = r, c + 1
        edges.append(_edge_id(_node(r, c), _node(nr, nc)))
        r, c = nr, nc
    return Line(tuple(edges))


def generate_grid(spec: GridSpec) -> tuple[Network, PoolSystem]:
    """Seeded lattice instance: capacities then lines, in a fixed order."""
    rng = np.random.default_rng(spec.seed)
    nodes = [_node(r, c) for r in range(spec.rows) for c in range(spec.cols)]
    pairs = _grid_edges(spec.rows, spec.cols)
    lo, hi = spec.capacity_range
    caps = rng.uniform(lo, hi, size=len(pairs))
    edges = [Edge(_edge_id(t, h), t, h, float(cap)) for (t, h), cap in zip(pairs, caps)]

    lines: dict[tuple[str, str], Line] = {}
    pool_ids = [f"pool{k}" for k in range(spec.pools)]
    lop_ids = [f"lop{p}" for p in range(spec.lines_per_pool)]
    for k in pool_ids:
        for lop in lop_ids:
            lines[(lop, k)] = _monotone_path(spec, rng)
    return Network(nodes, edges), PoolSystem(pool_ids, lines)


def perturb_pool(
    spec: GridSpec, pools: PoolSystem, fraction: float, seed: int
) -> PoolSystem:
    """Resample a fraction of all lines with fresh paths from the same family.

    ceil(fraction * number of lines) lines are chosen without replacement
    and each is replaced by a different random line (resampling until the
    replacement actually differs).
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must lie in [0, 1], got {fraction}")
    keys = sorted(pools.lines)
    count = int(np.ceil(fraction * len(keys)))
    if count == 0:
        return PoolSystem(pools.pool_ids, pools.lines)
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(keys), size=count, replace=False)
    lines = dict(pools.lines)
    for i in sorted(int(j) for j in chosen):
        key = keys[i]
        old = lines[key]
        for _ in range(10_000):
            fresh = _monotone_path(spec, rng)
            if fresh.edge_ids != old.edge_ids:
                lines[key] = fresh
                break
        else:
            raise ValueError("could not draw a distinct replacement line")
    return PoolSystem(pools.pool_ids, lines)


# ---------------------------------------------------------------------------
# Valuation tables for experiments.

def uniform_utilities(
    pools: PoolSystem, low: float, high: float, seed: int
) -> UtilityTable:
    """Independent uniform coefficients per (operator, pool)."""
    if not 0 < low <= high:
        raise ValueError(f"bad coefficient range [{low}, {high}]")
    rng = np.random.default_rng(seed)
    entries = {
        key: UtilitySpec(float(rng.uniform(low, high)))
        for key in sorted(pools.lines)
    }
    return UtilityTable(entries)


def pool_scaled_utilities(
    pools: PoolSystem, base: float, scales: Sequence[float]
) -> UtilityTable:
    """One coefficient per pool: base times that pool's scale, same for all operators."""
    if len(scales) != len(pools.pool_ids):
        raise ValueError("need exactly one scale per pool")
    by_pool = dict(zip(pools.pool_ids, scales))
    entries = {
        (lop, k): UtilitySpec(float(base * by_pool[k]))
        for (lop, k) in sorted(pools.lines)
    }
    return UtilityTable(entries)


# ---------------------------------------------------------------------------
# Disruptions.

@dataclass(frozen=True)
class DisruptionSpec:
    """Capacity shock recipe applied to already congested edges.

    kind "reduce" scales capacity by (1 - magnitude) on edge_count congested
    edges, "increase" by (1 + magnitude), and "mixed" does both on disjoint
    sets of edge_count edges each.  magnitude may be zero (a null shock used
    as a control).
    """

    kind: str
    edge_count: int
    magnitude: float
    seed: int = 0

    _KINDS = ("reduce", "increase", "mixed")

    def __post_init__(self) -> None:
        if self.kind not in self._KINDS:
            raise ValueError(f"kind must be one of {self._KINDS}, got {self.kind!r}")
        if self.edge_count < 1:
            raise ValueError("edge_count must be positive")
        if not 0.0 <= self.magnitude <= 1.0:
            raise ValueError(f"magnitude must lie in [0, 1], got {self.magnitude}")


def congested_edges(state: OuterState, threshold: float = 0.1) -> set[str]:
    """Edges priced above the threshold in at least one pool."""
    out: set[str] = set()
    for st in state.pool_states.values():
        for eid, lam in zip(st.edge_ids, st.prices):
            if lam > threshold:
                out.add(eid)
    return out


def apply_disruption(
    net: Network, spec: DisruptionSpec, congested: Iterable[str]
) -> Network:
    """Rescale capacities on seeded congested edges, untouched edges intact."""
    pool_of_edges = sorted(set(congested))
    need = 2 * spec.edge_count if spec.kind == "mixed" else spec.edge_count
    if len(pool_of_edges) < need:
        raise ValueError(
            f"disruption needs {need} congested edges, only {len(pool_of_edges)} available"
        )
    rng = np.random.default_rng(spec.seed)
    picked = rng.choice(len(pool_of_edges), size=need, replace=False)
    picked_ids = [pool_of_edges[int(i)] for i in picked]
    new_caps: dict[str, float] = {}
    if spec.kind == "reduce":
        for eid in picked_ids:
            new_caps[eid] = net.capacity(eid) * (1.0 - spec.magnitude)
    elif spec.kind == "increase":
        for eid in picked_ids:
            new_caps[eid] = net.capacity(eid) * (1.0 + spec.magnitude)
    else:
        for eid in picked_ids[: spec.edge_count]:
            new_caps[eid] = net.capacity(eid) * (1.0 - spec.magnitude)
        for eid in picked_ids[spec.edge_count :]:
            new_caps[eid] = net.capacity(eid) * (1.0 + spec.magnitude)
    return net.with_capacities(new_caps)


# ---------------------------------------------------------------------------
# Recovery experiments.

@dataclass
class ExperimentRecord:
    """One mechanism run in a recovery experiment, ready for the CSV sink."""

    instance: str
    mode: str                    # "cold" or "warm"
    f_updates: int
    price_updates: dict[str, int]
    bid_updates: int
    wall_time: float
    max_kkt: float
    status: str                  # "converged" or "nonconverged"

    @property
    def total_price_updates(self) -> int:
        return sum(self.price_updates.values())


@dataclass
class RecoveryResult:
    baseline: MechanismResult
    disrupted_net: Network
    cold: ExperimentRecord | None
    warm: ExperimentRecord | None
    cold_result: MechanismResult | None
    warm_result: MechanismResult | None

    def records(self) -> list[ExperimentRecord]:
        return [r for r in (self.cold, self.warm) if r is not None]


def _record(instance: str, mode: str, res: MechanismResult, max_kkt: float) -> ExperimentRecord:
    return ExperimentRecord(
        instance=instance,
        mode=mode,
        f_updates=res.f_updates,
        price_updates=dict(res.price_updates),
        bid_updates=res.bid_updates,
        wall_time=res.wall_time,
        max_kkt=max_kkt,
        status="converged" if res.converged else "nonconverged",
    )


def run_recovery_experiment(
    net: Network,
    pools: PoolSystem,
    utilities: UtilityTable,
    disruption: DisruptionSpec,
    cfg: MechanismConfig | None = None,
    instance: str = "instance",
    congestion_threshold: float = 0.1,
    baseline_cfg: MechanismConfig | None = None,
    baseline: MechanismResult | None = None,
    modes: Iterable[str] = ("cold", "warm"),
) -> RecoveryResult:
    """Converge, disrupt, then restart on the shock in the requested modes.

    The baseline run must converge (it plays the role of the known optimum a
    disruption hits); by default it runs under a tighter equal-cost test
    than the recovery runs so warm restarts measure the shock, not leftover
    slack in the baseline.  A precomputed converged `baseline` skips that
    solve, which matters when several disruptions hit the same instance.
    Non-convergence of a recovery run is recorded in its ExperimentRecord,
    not raised.
    """
    cfg = cfg or MechanismConfig()
    wanted = set(modes)
    if not wanted:
        raise ValueError("at least one of cold/warm must run")
    if not wanted <= {"cold", "warm"}:
        raise ValueError(f"unknown recovery modes: {sorted(wanted - {'cold', 'warm'})}")
    if baseline is None:
        if baseline_cfg is None:
            baseline_cfg = replace(cfg, eps_cost=min(cfg.eps_cost, 0.02))
        baseline = run_mechanism(net, pools, utilities, baseline_cfg)
    if not baseline.converged:
        raise RuntimeError(f"baseline run failed to converge: {baseline.diagnostics}")

    hot = congested_edges(baseline.state, congestion_threshold)
    shocked = apply_disruption(net, disruption, hot)

    cold_res = warm_res = None
    cold_rec = warm_rec = None
    if "warm" in wanted:
        warm_res = run_mechanism(shocked, pools, utilities, cfg, warm=baseline.state)
        kkt = mechanism_kkt(shocked, pools, utilities, warm_res.state).max_scaled()
        warm_rec = _record(instance, "warm", warm_res, kkt)
    if "cold" in wanted:
        cold_res = run_mechanism(shocked, pools, utilities, cfg)
        kkt = mechanism_kkt(shocked, pools, utilities, cold_res.state).max_scaled()
        cold_rec = _record(instance, "cold", cold_res, kkt)
    return RecoveryResult(
        baseline=baseline,
        disrupted_net=shocked,
        cold=cold_rec,
        warm=warm_rec,
        cold_result=cold_res,
        warm_result=warm_res,
    )
