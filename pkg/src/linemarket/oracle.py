"""Centralized reference solver and optimality certification.

The market mechanism is decentralized; this module solves the same
allocation problem directly so tests can compare the two.  For a fixed
capacity split the problem decomposes per pool into a concave program whose
explicit convex dual over edge prices is minimized by a projected,
Levenberg-damped Newton method (see _clearing_prices).  The full problem
adds a grid-plus-refinement search over the capacity split simplex.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .network import Network, PoolSystem, PoolView, compile_pool
from .multi_pool import OuterState
from .utility import UtilityTable, marginal_utility, utility

__all__ = [
    "UnsupportedSizeError",
    "KKTReport",
    "kkt_report",
    "mechanism_kkt",
    "FixedShareSolution",
    "solve_fixed_f",
    "solve_fixed_bids",
    "OracleSolution",
    "solve_full",
]

_TINY = 1e-30


class UnsupportedSizeError(ValueError):
    """The exhaustive split search is limited to four pools."""


# ---------------------------------------------------------------------------
# Demand curves seen by the dual solver.

class _SqrtDemand:
    """Demand of valuation a*sqrt(x): x(price) = (a / 2 price)^2."""

    def __init__(self, coefficients: np.ndarray) -> None:
        self.a = np.asarray(coefficients, dtype=float)
        self.active = self.a > 0.0

    def x(self, mu: np.ndarray) -> np.ndarray:
        safe = np.maximum(mu, _TINY)
        return np.where(self.active, (self.a / (2.0 * safe)) ** 2, 0.0)

    def slope(self, mu: np.ndarray, x: np.ndarray) -> np.ndarray:
        return np.where(self.active, -2.0 * x / np.maximum(mu, _TINY), 0.0)

    def inverse(self, x: np.ndarray) -> np.ndarray:
        return np.where(self.active, self.a / (2.0 * np.sqrt(np.maximum(x, _TINY))), 0.0)

    def conjugate(self, mu: np.ndarray) -> np.ndarray:
        # sup_x a*sqrt(x) - mu*x, the per-operator term of the dual
        out = np.zeros_like(self.a)
        act = self.active
        out[act] = self.a[act] ** 2 / (4.0 * np.maximum(mu[act], _TINY))
        return out


class _BidDemand:
    """Demand of frozen bids: x(price) = bid / price."""

    def __init__(self, bids: np.ndarray) -> None:
        self.w = np.asarray(bids, dtype=float)
        self.active = self.w > 0.0

    def x(self, mu: np.ndarray) -> np.ndarray:
        safe = np.maximum(mu, _TINY)
        return np.where(self.active, self.w / safe, 0.0)

    def slope(self, mu: np.ndarray, x: np.ndarray) -> np.ndarray:
        return np.where(self.active, -x / np.maximum(mu, _TINY), 0.0)

    def inverse(self, x: np.ndarray) -> np.ndarray:
        return np.where(self.active, self.w / np.maximum(x, _TINY), 0.0)

    def conjugate(self, mu: np.ndarray) -> np.ndarray:
        # sup_x w*log(x) - mu*x
        out = np.zeros_like(self.w)
        act = self.active
        w = self.w[act]
        out[act] = w * (np.log(w / np.maximum(mu[act], _TINY)) - 1.0)
        return out


@dataclass
class _PoolSolve:
    prices: np.ndarray
    freqs: np.ndarray
    converged: bool
    iterations: int


def _clearing_prices(
    incidence: np.ndarray,
    budget: np.ndarray,
    demand,
    init: np.ndarray | None = None,
    max_iters: int = 300,
    tol: float = 1e-11,
) -> _PoolSolve:
    """Edge prices clearing one pool at capacity budget `budget`.

    Minimizes the dual of  max sum(values) s.t. incidence @ x <= budget
    over nonnegative prices with a projected, Levenberg-damped Newton
    method.  Edges crossed by exactly the same set of active operators are
    collapsed first: within such a group only the scarcest edge can carry a
    positive price, and the collapse removes the flat directions that would
    otherwise make the Newton system singular.  The dual value blows up
    whenever an active operator's path turns free of charge, so descent
    steps keep every such path priced without explicit bookkeeping.  At the
    returned point every active operator sits on her demand curve, loads
    never exceed the budget beyond solver precision, and priced edges run
    at budget.
    """
    n_edges, n_lops = incidence.shape
    act = demand.active
    if n_lops == 0 or not act.any():
        return _PoolSolve(np.zeros(n_edges), np.zeros(n_lops), True, 0)

    # group edges by active-operator support; representative = scarcest edge
    groups: dict[bytes, list[int]] = {}
    for e in range(n_edges):
        row = incidence[e, act]
        if row.any():
            groups.setdefault(row.tobytes(), []).append(e)
    rep_of = {min(idx, key=lambda e: budget[e]): idx for idx in groups.values()}
    reps = sorted(rep_of)
    sub_inc = incidence[reps]
    sub_budget = np.array([min(budget[e] for e in rep_of[r]) for r in reps])

    m = len(reps)
    line_idx = [np.flatnonzero(sub_inc[:, p]) for p in range(n_lops)]
    line_len = np.maximum(sub_inc.sum(axis=0), 1.0)
    bneck = np.array([sub_budget[idx].min() if len(idx) else 0.0 for idx in line_idx])
    scale_b = max(1.0, float(sub_budget.max()))

    def dual_value(pr: np.ndarray) -> float:
        mu = sub_inc.T @ pr
        if np.any(mu[act] <= 0.0):
            return np.inf
        return float(demand.conjugate(mu).sum() + pr @ sub_budget)

    def ensure_cover(pr: np.ndarray) -> None:
        # price the bottleneck of any active path the start left free
        mu = sub_inc.T @ pr
        for p in np.flatnonzero(act):
            idx = line_idx[p]
            if mu[p] <= 0.0 and len(idx):
                e = idx[np.argmin(sub_budget[idx])]
                seed = float(demand.inverse(np.full(n_lops, max(bneck[p], _TINY)))[p])
                pr[e] = max(pr[e], seed / line_len[p], _TINY)

    # fair-share start: price each edge as if its budget were split evenly
    # among the lines crossing it
    crowd = np.maximum(sub_inc[:, act].sum(axis=1), 1.0)
    fair = sub_budget / crowd
    prices = np.zeros(m)
    for p in np.flatnonzero(act):
        # inverse() is vectorized over operators, not edges; probe per edge
        for e in line_idx[p]:
            guess = float(demand.inverse(np.full(n_lops, max(fair[e], _TINY)))[p])
            prices[e] = max(prices[e], guess / line_len[p])
    ensure_cover(prices)
    if init is not None:
        # group members share one price sum, so paths keep their old cost
        full = np.maximum(np.asarray(init, dtype=float), 0.0)
        warm = np.array([sum(full[e] for e in rep_of[r]) for r in reps])
        ensure_cover(warm)
        if dual_value(warm) < dual_value(prices):
            prices = warm

    cur = dual_value(prices)
    converged = False
    iters = 0
    for _ in range(max_iters):
        iters += 1
        mu = sub_inc.T @ prices
        x = demand.x(mu)
        load = sub_inc @ x
        gap = load - sub_budget
        feas = float(np.maximum(gap, 0.0).max(initial=0.0))
        comp = float((prices * np.abs(gap)).max(initial=0.0))
        if max(feas, comp) <= tol * scale_b:
            converged = True
            break

        grad = -gap  # dual gradient: budget - load
        fset = np.flatnonzero((prices > 0.0) | (grad < 0.0))
        gf = grad[fset]
        sub = sub_inc[fset]
        hess = (sub * -demand.slope(mu, x)) @ sub.T
        lev = max(1e-14 * float(np.trace(hess)) / len(fset),
                  1e-8 * float(np.abs(gf).max()) / scale_b)
        hess[np.diag_indices_from(hess)] += lev
        try:
            newton = np.linalg.solve(hess, -gf)
        except np.linalg.LinAlgError:
            newton = None

        accepted = False
        candidates = [newton, -gf] if newton is not None else [-gf]
        for step in candidates:
            if float(gf @ step) >= 0.0:
                continue
            t_step = 1.0
            for _ in range(60):
                trial = prices.copy()
                trial[fset] = np.maximum(0.0, prices[fset] + t_step * step)
                value = dual_value(trial)
                moved = trial[fset] - prices[fset]
                if np.isfinite(value) and value <= cur + 1e-4 * min(0.0, float(gf @ moved)):
                    if np.array_equal(trial, prices):
                        break
                    prices, cur = trial, value
                    accepted = True
                    break
                t_step *= 0.5
            if accepted:
                break
        if not accepted:
            break

    mu = sub_inc.T @ prices
    x = demand.x(mu)
    load = sub_inc @ x
    over = load > sub_budget
    if over.any():
        # uniform shrink onto the feasible set; perturbation is at solver
        # precision when the descent converged
        ratio = float(np.max(load[over] / np.maximum(sub_budget[over], _TINY)))
        if ratio > 1.0:
            x = x / ratio
    out = np.zeros(n_edges)
    out[reps] = prices
    return _PoolSolve(out, x, converged, iters)

# ---------------------------------------------------------------------------
# Fixed-split solves.

@dataclass
class FixedShareSolution:
    """Optimal pool markets at a frozen capacity split."""

    shares: dict[str, float]
    frequencies: dict[tuple[str, str], float]
    prices: dict[tuple[str, str], float]
    pool_costs: dict[str, float]
    objective: float
    converged: bool


def _solve_one_pool(
    view: PoolView,
    coefficients: np.ndarray,
    share: float,
    init: np.ndarray | None = None,
) -> _PoolSolve:
    demand = _SqrtDemand(coefficients)
    return _clearing_prices(view.incidence, view.capacity * share, demand, init=init)


def solve_fixed_f(
    net: Network,
    pools: PoolSystem,
    utilities: UtilityTable,
    shares: Mapping[str, float],
) -> FixedShareSolution:
    """Reference optimum for a frozen capacity split.

    Every pool with a positive share is solved independently; shares must be
    positive and sum to at most one.
    """
    utilities.validate_against(pools)
    share_vec = np.array([float(shares[k]) for k in pools.pool_ids])
    if np.any(share_vec <= 0.0):
        raise ValueError("every pool share must be positive")
    if float(share_vec.sum()) > 1.0 + 1e-9:
        raise ValueError(f"shares sum to {share_vec.sum()}, above 1")

    freqs: dict[tuple[str, str], float] = {}
    prices: dict[tuple[str, str], float] = {}
    costs: dict[str, float] = {}
    objective = 0.0
    ok = True
    for k, share in zip(pools.pool_ids, share_vec):
        view = compile_pool(net, pools, k)
        coeffs = utilities.coefficients_for(view)
        sol = _solve_one_pool(view, coeffs, share)
        ok = ok and sol.converged
        for lop, x in zip(view.lop_ids, sol.freqs):
            freqs[(lop, k)] = float(x)
            objective += utility(utilities.spec(lop, k), max(0.0, float(x)))
        for eid, lam in zip(view.edge_ids, sol.prices):
            if lam != 0.0:
                prices[(eid, k)] = float(lam)
        costs[k] = float(view.capacity @ sol.prices)
    return FixedShareSolution(
        shares={k: float(s) for k, s in zip(pools.pool_ids, share_vec)},
        frequencies=freqs,
        prices=prices,
        pool_costs=costs,
        objective=objective,
        converged=ok,
    )


def solve_fixed_bids(view: PoolView, bids: np.ndarray, share: float) -> np.ndarray:
    """Clearing prices of one pool under frozen bids.

    This is the stationary point of the frozen-bid price dynamics; the
    descent tests measure distance to it.
    """
    sol = _clearing_prices(view.incidence, view.capacity * share, _BidDemand(bids))
    if not sol.converged:
        raise RuntimeError("frozen-bid clearing prices did not reach solver precision")
    return sol.prices


# ---------------------------------------------------------------------------
# Optimality certification.

@dataclass(frozen=True)
class KKTReport:
    """Residuals of the clearing conditions, raw and scale-free.

    stationarity entries are None when no operator runs a positive
    frequency (nothing to certify there).  Scaled values divide by the
    natural magnitude of the condition: path price for stationarity, cost
    level for the cost and complementarity rows, per-edge capacity for
    overloads.
    """

    stationarity_raw: float | None
    stationarity_rel: float | None
    cost_spread_raw: float
    cost_spread_rel: float
    complementarity_raw: float
    complementarity_rel: float
    split_comp_raw: float
    split_comp_rel: float
    overload_raw: float
    overload_rel: float
    split_excess: float
    negativity: float

    def max_scaled(self) -> float:
        vals = [
            self.stationarity_rel if self.stationarity_rel is not None else 0.0,
            self.cost_spread_rel,
            self.complementarity_rel,
            self.split_comp_rel,
            self.overload_rel,
            self.split_excess,
            self.negativity,
        ]
        return max(vals)


def kkt_report(
    net: Network,
    pools: PoolSystem,
    utilities: UtilityTable,
    freqs: Mapping[tuple[str, str], float],
    shares: Mapping[str, float],
    prices: Mapping[tuple[str, str], float],
    cost_level: float,
) -> KKTReport:
    """Certify a candidate clearing point against the optimality conditions.

    Checks, per pool: marginal value equals path price on running lines,
    network cost at pool prices equals the common cost level, priced edges
    run at share-scaled capacity, loads within capacity; plus the split
    summing to one with complementary cost level, and nonnegativity all
    around.
    """
    capacity = net.capacity_vector()
    level_scale = max(abs(cost_level), _TINY)

    stat_raw: float | None = None
    stat_rel: float | None = None
    comp_raw = 0.0
    comp_rel = 0.0
    over_raw = 0.0
    over_rel = 0.0
    spread_raw = 0.0
    neg = 0.0

    for k in pools.pool_ids:
        share = float(shares[k])
        neg = max(neg, -share)
        load = {eid: 0.0 for eid in net.edge_ids}
        for lop in pools.lops_in(k):
            x = float(freqs.get((lop, k), 0.0))
            neg = max(neg, -x)
            line = pools.line(lop, k)
            for eid in line.edge_ids:
                load[eid] += x
            if x > 0.0:
                mu = sum(float(prices.get((eid, k), 0.0)) for eid in line.edge_ids)
                gap = abs(marginal_utility(utilities.spec(lop, k), x) - mu)
                stat_raw = gap if stat_raw is None else max(stat_raw, gap)
                rel = gap / max(mu, _TINY)
                stat_rel = rel if stat_rel is None else max(stat_rel, rel)
        cost_k = 0.0
        for e in net.edges:
            lam = float(prices.get((e.id, k), 0.0))
            neg = max(neg, -lam)
            cost_k += e.capacity * lam
            slack = load[e.id] - e.capacity * share
            comp_raw = max(comp_raw, abs(lam * slack))
            over_raw = max(over_raw, slack)
            over_rel = max(over_rel, slack / e.capacity)
        spread_raw = max(spread_raw, abs(cost_k - cost_level))

    total_share = sum(float(shares[k]) for k in pools.pool_ids)
    split_excess = max(0.0, total_share - 1.0)
    split_comp_raw = abs(cost_level * (total_share - 1.0))

    return KKTReport(
        stationarity_raw=stat_raw,
        stationarity_rel=stat_rel,
        cost_spread_raw=spread_raw,
        cost_spread_rel=spread_raw / level_scale,
        complementarity_raw=comp_raw,
        complementarity_rel=comp_raw / level_scale,
        split_comp_raw=split_comp_raw,
        split_comp_rel=split_comp_raw / level_scale,
        overload_raw=max(0.0, over_raw),
        overload_rel=max(0.0, over_rel),
        split_excess=split_excess,
        negativity=max(0.0, neg),
    )


def mechanism_kkt(
    net: Network, pools: PoolSystem, utilities: UtilityTable, state: OuterState
) -> KKTReport:
    """kkt_report applied to a mechanism OuterState."""
    freqs: dict[tuple[str, str], float] = {}
    prices: dict[tuple[str, str], float] = {}
    for k, st in state.pool_states.items():
        for lop, x in zip(st.lop_ids, st.freqs):
            freqs[(lop, k)] = float(x)
        for eid, lam in zip(st.edge_ids, st.prices):
            if lam != 0.0:
                prices[(eid, k)] = float(lam)
    return kkt_report(net, pools, utilities, freqs, state.shares.as_dict(), prices, state.cost_level)


# ---------------------------------------------------------------------------
# Full problem: grid search over the capacity split.

@dataclass
class OracleSolution:
    """Reference optimum of the joint allocation-and-split problem."""

    frequencies: dict[tuple[str, str], float]
    shares: dict[str, float]
    prices: dict[tuple[str, str], float]
    cost_level: float
    cost_gap: float        # (max - mean) / max over pool costs, diagnostic
    objective: float
    kkt: KKTReport
    converged: bool


def _simplex_grid(n_pools: int, step: float) -> list[np.ndarray]:
    """Interior grid points of the split simplex at the given step."""
    ticks = int(round(1.0 / step))
    pts: list[np.ndarray] = []
    if n_pools == 2:
        for i in range(1, ticks):
            pts.append(np.array([i, ticks - i]) / ticks)
    elif n_pools == 3:
        for i in range(1, ticks):
            for j in range(1, ticks - i):
                pts.append(np.array([i, j, ticks - i - j]) / ticks)
    elif n_pools == 4:
        for i in range(1, ticks):
            for j in range(1, ticks - i):
                for m in range(1, ticks - i - j):
                    pts.append(np.array([i, j, m, ticks - i - j - m]) / ticks)
    return pts


def _box_refine(center: np.ndarray, step: float, fine: float) -> list[np.ndarray]:
    """Renormalized fine grid in a box around the incumbent split."""
    n = len(center)
    offsets = np.arange(-step, step + fine / 2, fine)
    pts: list[np.ndarray] = []
    if n == 2:
        for da in offsets:
            cand = np.array([center[0] + da, center[1] - da])
            if np.all(cand > 0):
                pts.append(cand)
        return pts
    grids = np.meshgrid(*([offsets] * (n - 1)), indexing="ij")
    flat = np.stack([g.ravel() for g in grids], axis=1)
    for row in flat:
        cand = center.copy()
        cand[:-1] = center[:-1] + row
        cand[-1] = 1.0 - cand[:-1].sum()
        if np.all(cand > 0):
            pts.append(cand)
    return pts


def solve_full(
    net: Network, pools: PoolSystem, utilities: UtilityTable
) -> OracleSolution:
    """Reference optimum over frequencies and the capacity split jointly.

    Exhausts a coarse simplex grid over the split (1/50 steps up to three
    pools, 1/20 at four) and refines twice at ten times the resolution
    around the incumbent.  Objective ties break toward the lexicographically
    smallest split.  More than four pools is out of scope.
    """
    utilities.validate_against(pools)
    n_pools = len(pools.pool_ids)
    if n_pools > 4:
        raise UnsupportedSizeError(f"split search supports at most 4 pools, got {n_pools}")

    views = {k: compile_pool(net, pools, k) for k in pools.pool_ids}
    coeffs = {k: utilities.coefficients_for(views[k]) for k in pools.pool_ids}
    warm: dict[str, np.ndarray] = {}

    def eval_split(split: np.ndarray) -> tuple[float, dict]:
        sols = {}
        total = 0.0
        ok = True
        for k, share in zip(pools.pool_ids, split):
            sol = _solve_one_pool(views[k], coeffs[k], float(share), init=warm.get(k))
            warm[k] = sol.prices
            ok = ok and sol.converged
            sols[k] = sol
            total += float(np.sum(coeffs[k] * np.sqrt(np.maximum(sol.freqs, 0.0))))
        return total, {"pools": sols, "ok": ok}

    if n_pools == 1:
        candidates = [np.array([1.0])]
    else:
        step = 1.0 / 50.0 if n_pools <= 3 else 1.0 / 20.0
        candidates = _simplex_grid(n_pools, step)

    best_obj = -np.inf
    best_split: np.ndarray | None = None
    best_info: dict | None = None
    for cand in candidates:
        obj, info = eval_split(cand)
        better = obj > best_obj + 1e-12
        tie = abs(obj - best_obj) <= 1e-12 and best_split is not None and tuple(cand) < tuple(best_split)
        if better or tie:
            best_obj, best_split, best_info = obj, cand, info

    if n_pools > 1:
        step = 1.0 / 50.0 if n_pools <= 3 else 1.0 / 20.0
        for _ in range(2):
            fine = step / 10.0
            for cand in _box_refine(best_split, step, fine):
                obj, info = eval_split(cand)
                better = obj > best_obj + 1e-12
                tie = abs(obj - best_obj) <= 1e-12 and tuple(cand) < tuple(best_split)
                if better or tie:
                    best_obj, best_split, best_info = obj, cand, info
            step = fine

    assert best_split is not None and best_info is not None
    freqs: dict[tuple[str, str], float] = {}
    prices: dict[tuple[str, str], float] = {}
    costs: list[float] = []
    converged = bool(best_info["ok"])
    for k in pools.pool_ids:
        sol: _PoolSolve = best_info["pools"][k]
        view = views[k]
        for lop, x in zip(view.lop_ids, sol.freqs):
            freqs[(lop, k)] = float(x)
        for eid, lam in zip(view.edge_ids, sol.prices):
            if lam != 0.0:
                prices[(eid, k)] = float(lam)
        costs.append(float(view.capacity @ sol.prices))

    cost_level = max(costs)
    cost_gap = (max(costs) - float(np.mean(costs))) / max(max(costs), _TINY)
    shares = {k: float(s) for k, s in zip(pools.pool_ids, best_split)}
    report = kkt_report(net, pools, utilities, freqs, shares, prices, cost_level)
    return OracleSolution(
        frequencies=freqs,
        shares=shares,
        prices=prices,
        cost_level=cost_level,
        cost_gap=cost_gap,
        objective=best_obj,
        kkt=report,
        converged=converged,
    )
