"""Cross-pool capacity split driven by pool cost equalization.

Each pool clears its own market at the current capacity split; the split
then shifts toward pools whose per-unit capacity cost exceeds the average,
is renormalized onto the simplex, and the inner markets re-clear warm.  At
the joint fixed point every pool is internally cleared and all pool costs
agree, which is the optimality certificate for the split.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .network import Network, PoolSystem, PoolView, compile_pool
from .single_pool import (
    DynamicsConfig,
    PoolMarketState,
    SinglePoolResult,
    _run_pool,
)
from .utility import UtilityTable, utility

__all__ = [
    "ProportionVector",
    "MechanismConfig",
    "OuterState",
    "MechanismResult",
    "pool_cost",
    "costs_equal",
    "update_proportions",
    "run_mechanism",
]

_TINY = 1e-30


@dataclass(frozen=True)
class ProportionVector:
    """Capacity split across pools: nonnegative, sums to one."""

    pool_ids: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self) -> None:
        if len(self.pool_ids) != len(self.values):
            raise ValueError("pool ids and values differ in length")
        if np.any(self.values < -1e-12):
            raise ValueError("proportions must be nonnegative")
        if abs(float(self.values.sum()) - 1.0) > 1e-9:
            raise ValueError(f"proportions must sum to 1, got {self.values.sum()}")

    @classmethod
    def uniform(cls, pool_ids: tuple[str, ...]) -> "ProportionVector":
        n = len(pool_ids)
        return cls(pool_ids, np.full(n, 1.0 / n))

    def share(self, pool_id: str) -> float:
        return float(self.values[self.pool_ids.index(pool_id)])

    def as_dict(self) -> dict[str, float]:
        return {k: float(v) for k, v in zip(self.pool_ids, self.values)}


def pool_cost(capacity: np.ndarray, prices: np.ndarray) -> float:
    """Cost of the whole network at one pool's prices (capacity dot prices)."""
    return float(capacity @ prices)


def costs_equal(costs: np.ndarray, eps_cost: float) -> bool:
    """Relative spread test: (max - min) / mean within eps_cost.

    A single pool trivially passes.
    """
    if len(costs) <= 1:
        return True
    spread = float(costs.max() - costs.min())
    return spread / max(float(costs.mean()), _TINY) <= eps_cost


def _floor_simplex(values: np.ndarray, floor: float) -> np.ndarray:
    """Project onto the simplex slice {sum = 1, every entry >= floor}."""
    values = values / values.sum()
    if floor <= 0.0 or np.all(values >= floor):
        return values
    excess = np.maximum(values - floor, 0.0)
    budget = 1.0 - floor * len(values)
    return floor + excess * (budget / max(excess.sum(), _TINY))


def update_proportions(
    shares: ProportionVector,
    costs: np.ndarray,
    eta_f: float,
    floor: float,
    normalized: bool = True,
) -> ProportionVector:
    """One ascent step of the capacity split toward costlier pools.

    The drive term is max(0, cost_k - mean cost), divided by the mean cost
    in the normalized form (the default); the raw form keeps the unscaled
    difference.  After the step the split is renormalized and floored away
    from zero so no pool is ever starved outright.  A nonpositive mean cost
    makes the step undefined; the split is returned unchanged.
    """
    level = float(costs.mean())
    if not level > 0.0:
        return shares
    drive = np.maximum(0.0, costs - level)
    if normalized:
        drive = drive / level
    raw = shares.values + eta_f * drive
    return ProportionVector(shares.pool_ids, _floor_simplex(raw, floor))


@dataclass(frozen=True)
class MechanismConfig:
    """Outer-loop tuning: split step, equal-cost test, iteration budgets."""

    inner: DynamicsConfig = field(default_factory=DynamicsConfig)
    eta_f: float = 0.1
    eps_cost: float = 0.05
    f_floor: float = 1e-4
    max_outer: int = 200
    normalized_f_update: bool = True

    def __post_init__(self) -> None:
        if not self.eta_f > 0:
            raise ValueError("eta_f must be positive")
        if not self.eps_cost > 0:
            raise ValueError("eps_cost must be positive")
        if not 0.0 <= self.f_floor < 0.5:
            raise ValueError("f_floor must lie in [0, 0.5)")
        if self.max_outer < 1:
            raise ValueError("max_outer must be positive")


@dataclass
class OuterState:
    """Joint state of the mechanism between outer iterations."""

    shares: ProportionVector
    pool_states: dict[str, PoolMarketState]
    pool_costs: dict[str, float]
    cost_level: float      # mean pool cost at the last measurement
    outer_iter: int


@dataclass
class MechanismResult:
    state: OuterState
    converged: bool
    f_updates: int
    price_updates: dict[str, int]
    bid_updates: int
    skipped_refreshes: int
    objective: float
    wall_time: float
    outer_trace: list[dict]
    inner_traces: dict[str, list[dict]] = field(default_factory=dict)
    diagnostics: str = ""

    def frequencies(self) -> dict[tuple[str, str], float]:
        out: dict[tuple[str, str], float] = {}
        for k, st in self.state.pool_states.items():
            for lop, x in zip(st.lop_ids, st.freqs):
                out[(lop, k)] = float(x)
        return out


def _objective(utilities: UtilityTable, pool_states: Mapping[str, PoolMarketState]) -> float:
    total = 0.0
    for k, st in pool_states.items():
        for lop, x in zip(st.lop_ids, st.freqs):
            total += utility(utilities.spec(lop, k), max(0.0, float(x)))
    return total


def run_mechanism(
    net: Network,
    pools: PoolSystem,
    utilities: UtilityTable,
    cfg: MechanismConfig | None = None,
    warm: OuterState | None = None,
) -> MechanismResult:
    """Run the full two-level mechanism to the equal-cost fixed point.

    Cold runs start from the uniform split with fresh pool markets; a warm
    OuterState resumes with its split, prices, and bids intact.  The result
    reports convergence honestly: an exhausted budget or a stalled inner
    market yields converged=False plus diagnostics, never an exception.
    """
    cfg = cfg or MechanismConfig()
    utilities.validate_against(pools)
    views: dict[str, PoolView] = {k: compile_pool(net, pools, k) for k in pools.pool_ids}
    coeffs = {k: utilities.coefficients_for(views[k]) for k in pools.pool_ids}
    capacity = net.capacity_vector()

    if warm is not None:
        shares = warm.shares
        states: dict[str, PoolMarketState | None] = {
            k: warm.pool_states[k].copy() for k in pools.pool_ids
        }
    else:
        shares = ProportionVector.uniform(tuple(pools.pool_ids))
        states = {k: None for k in pools.pool_ids}

    t0 = time.perf_counter()
    f_updates = 0
    price_updates = {k: 0 for k in pools.pool_ids}
    bid_updates = 0
    skipped = 0
    outer_trace: list[dict] = []
    inner_traces: dict[str, list[dict]] = {k: [] for k in pools.pool_ids}
    diagnostics = ""
    converged = False
    pool_costs = {k: 0.0 for k in pools.pool_ids}
    level = 0.0
    outer = 0

    for outer in range(cfg.max_outer + 1):
        inner_ok = True
        for k in pools.pool_ids:
            res: SinglePoolResult = _run_pool(
                views[k], coeffs[k], shares.share(k), states[k], cfg.inner
            )
            states[k] = res.state
            price_updates[k] += res.iterations
            bid_updates += res.bid_updates
            skipped += res.skipped_refreshes
            if res.trace:
                for row in res.trace:
                    inner_traces[k].append({"outer_iter": outer, **row})
            if not res.converged:
                inner_ok = False
                diagnostics = (
                    f"pool {k} hit the iteration budget at outer step {outer} "
                    f"(residuals: excess={res.residuals.max_excess:.3g}, "
                    f"complementarity={res.residuals.max_complementarity:.3g}, "
                    f"stationarity={res.residuals.max_stationarity:.3g})"
                )
        pool_costs = {k: pool_cost(capacity, states[k].prices) for k in pools.pool_ids}
        cost_vec = np.array([pool_costs[k] for k in pools.pool_ids])
        level = float(cost_vec.mean())
        outer_trace.append(
            {
                "outer_iter": outer,
                "shares": shares.as_dict(),
                "costs": dict(pool_costs),
                "cost_level": level,
                "price_updates": dict(price_updates),
            }
        )
        if not inner_ok:
            break
        if costs_equal(cost_vec, cfg.eps_cost):
            converged = True
            break
        if not level > 0.0:
            diagnostics = "mean pool cost is zero; split update undefined"
            break
        if outer == cfg.max_outer:
            diagnostics = f"equal-cost test still failing after {cfg.max_outer} split updates"
            break
        shares = update_proportions(
            shares, cost_vec, cfg.eta_f, cfg.f_floor, cfg.normalized_f_update
        )
        f_updates += 1
        for k in pools.pool_ids:
            states[k].share = shares.share(k)

    final_states = {k: states[k] for k in pools.pool_ids}
    out = OuterState(
        shares=shares,
        pool_states=final_states,
        pool_costs=pool_costs,
        cost_level=level,
        outer_iter=outer,
    )
    return MechanismResult(
        state=out,
        converged=converged,
        f_updates=f_updates,
        price_updates=price_updates,
        bid_updates=bid_updates,
        skipped_refreshes=skipped,
        objective=_objective(utilities, final_states),
        wall_time=time.perf_counter() - t0,
        outer_trace=outer_trace,
        inner_traces={k: v for k, v in inner_traces.items() if v},
        diagnostics=diagnostics,
    )
