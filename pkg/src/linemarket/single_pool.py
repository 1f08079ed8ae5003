"""Per-pool bidding market: price dynamics, allocations, bid refresh.

Inside one pool the frequency proportion is fixed and three coupled rules
interact:

* the network side nudges each edge price along the capacity excess and
  projects at zero (price_step),
* operators are allocated bid/price trains on their line (allocate_frequencies),
* every few rounds operators re-bid optimally against current path prices
  (refresh_bids).

The fixed point of the three rules clears the pool: priced edges run at
capacity, unpriced edges have slack, and every allocation sits where the
operator's marginal value meets her path price.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .network import Network, PoolSystem, PoolView, compile_pool
from .utility import UtilityTable, best_response_bids

__all__ = [
    "DynamicsConfig",
    "PoolMarketState",
    "SinglePoolResult",
    "default_price_eta",
    "cold_start",
    "price_step",
    "allocate_frequencies",
    "refresh_bids",
    "pool_residuals",
    "run_single_pool",
    "run_price_dynamics",
]

# Allocations are truncated at this multiple of the line's physical ceiling
# while prices are still far from equilibrium; see DynamicsConfig.
_OVERLOAD = 1.25


@dataclass(frozen=True)
class DynamicsConfig:
    """Tuning knobs for the in-pool dynamics.

    price_eta of None means the capacity-scaled default: one percent of the
    smallest edge capacity divided by the largest number of lines sharing an
    edge.  overload_factor bounds how far past its physical ceiling a line
    may be provisionally allocated while prices catch up; any factor > 1
    keeps the excess signal alive without letting loads blow up when bids
    and prices are still orders of magnitude apart.
    """

    price_eta: float | None = None
    bid_refresh_period: int = 10
    abs_tol: float = 0.1
    rel_tol: float = 0.1
    max_iters: int = 50_000
    overload_factor: float = _OVERLOAD
    trace_stride: int = 0

    def __post_init__(self) -> None:
        if self.price_eta is not None and not self.price_eta > 0:
            raise ValueError("price_eta must be positive")
        if self.bid_refresh_period < 1:
            raise ValueError("bid_refresh_period must be a positive integer")
        if not (self.abs_tol > 0 and self.rel_tol > 0):
            raise ValueError("tolerances must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be positive")
        if not self.overload_factor >= 1.0:
            raise ValueError("overload_factor must be at least 1")


def default_price_eta(view: PoolView) -> float:
    """Capacity-scaled price step: 0.01 * min capacity / max lines per edge."""
    crowd = view.lines_per_edge().max() if view.n_lops else 1.0
    return 0.01 * float(view.capacity.min()) / max(1.0, float(crowd))


@dataclass
class PoolMarketState:
    """Mutable market state of one pool: prices, bids, allocations, share."""

    pool_id: str
    edge_ids: tuple[str, ...]
    lop_ids: tuple[str, ...]
    prices: np.ndarray
    bids: np.ndarray
    freqs: np.ndarray
    share: float

    def price_map(self) -> dict[str, float]:
        return {eid: float(v) for eid, v in zip(self.edge_ids, self.prices)}

    def bid_map(self) -> dict[str, float]:
        return {lop: float(v) for lop, v in zip(self.lop_ids, self.bids)}

    def freq_map(self) -> dict[str, float]:
        return {lop: float(v) for lop, v in zip(self.lop_ids, self.freqs)}

    def copy(self) -> "PoolMarketState":
        return PoolMarketState(
            self.pool_id,
            self.edge_ids,
            self.lop_ids,
            self.prices.copy(),
            self.bids.copy(),
            self.freqs.copy(),
            self.share,
        )

    def to_json(self) -> dict:
        return {
            "pool": self.pool_id,
            "share": self.share,
            "prices": self.price_map(),
            "bids": self.bid_map(),
            "freqs": self.freq_map(),
        }

    @classmethod
    def from_json(cls, doc: Mapping, view: PoolView) -> "PoolMarketState":
        prices = np.array([float(doc["prices"].get(eid, 0.0)) for eid in view.edge_ids])
        bids = np.array([float(doc["bids"].get(lop, 0.0)) for lop in view.lop_ids])
        freqs = np.array([float(doc["freqs"].get(lop, 0.0)) for lop in view.lop_ids])
        return cls(view.pool_id, view.edge_ids, view.lop_ids, prices, bids, freqs, float(doc["share"]))


def price_step(
    prices: np.ndarray,
    loads: np.ndarray,
    capacity: np.ndarray,
    share: float,
    eta: float,
) -> tuple[np.ndarray, np.ndarray]:
    """One projected Euler step of the edge price dynamics.

    Each price moves along the capacity excess (load minus share-scaled
    capacity) and is clipped at zero, so a zero-priced edge can only move
    up.  Returns the new prices and the excess vector that drove them.
    """
    excess = loads - capacity * share
    return np.maximum(0.0, prices + eta * excess), excess


def allocate_frequencies(
    view: PoolView,
    prices: np.ndarray,
    bids: np.ndarray,
    share: float,
    overload_factor: float = _OVERLOAD,
) -> tuple[np.ndarray, np.ndarray]:
    """Frequencies bought by each bid at current prices, and the path prices.

    The nominal allocation is bid / path price.  Two physical guards apply:
    at a zero path price a positive bidder receives exactly her line's
    ceiling (smallest share-scaled capacity along the line, which keeps the
    excess finite and pushes prices up), and at positive prices the
    allocation is truncated at overload_factor times that ceiling.
    """
    mu = view.incidence.T @ prices
    ceil = view.bottleneck * share
    with np.errstate(divide="ignore", invalid="ignore"):
        nominal = np.where(mu > 0.0, bids / np.where(mu > 0.0, mu, 1.0), np.inf)
    freqs = np.minimum(nominal, overload_factor * ceil)
    freqs = np.where((mu <= 0.0) & (bids > 0.0), ceil, freqs)
    freqs = np.where(bids > 0.0, freqs, 0.0)
    return freqs, mu


def refresh_bids(
    coefficients: np.ndarray, path_prices: np.ndarray, bids: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Re-bid optimally where the path price is positive.

    Entries with a zero path price keep their old bid; the boolean mask of
    those skipped entries is returned alongside the new bid vector.
    """
    skipped = ~(path_prices > 0.0)
    new_bids = np.where(skipped, bids, best_response_bids(coefficients, np.where(skipped, 1.0, path_prices)))
    return new_bids, skipped


@dataclass(frozen=True)
class PoolResiduals:
    """Convergence diagnostics of one pool state."""

    max_excess: float        # worst capacity violation, signed
    max_complementarity: float   # worst price * |excess|
    max_stationarity: float  # worst relative gap between marginal value and path price
    converged: bool


def pool_residuals(
    view: PoolView,
    coefficients: np.ndarray,
    state: PoolMarketState,
    abs_tol: float,
    rel_tol: float,
) -> PoolResiduals:
    loads = view.incidence @ state.freqs
    excess = loads - view.capacity * state.share
    mu = view.incidence.T @ state.prices

    feas = float(excess.max(initial=0.0))
    comp = float((state.prices * np.abs(excess)).max(initial=0.0))

    active = state.freqs > 0.0
    stat = 0.0
    priceless = bool(np.any(active & ~(mu > 0.0)))
    if np.any(active & (mu > 0.0)):
        sel = active & (mu > 0.0)
        marg = coefficients[sel] / (2.0 * np.sqrt(state.freqs[sel]))
        stat = float(np.max(np.abs(marg - mu[sel]) / mu[sel]))

    ok = (
        not priceless
        and feas <= abs_tol
        and comp <= abs_tol
        and stat <= rel_tol
    )
    return PoolResiduals(feas, comp, stat, ok)


def cold_start(view: PoolView, share: float) -> PoolMarketState:
    """Neutral initial state: unit bids, proportional-share prices.

    Every operator opens with a bid of one; each edge opens at the price
    that would exactly ration unit bids through its share-scaled capacity.
    """
    bids = np.ones(view.n_lops)
    cap = view.capacity * share
    crowd = view.incidence @ bids
    prices = np.where(crowd > 0.0, crowd / np.maximum(cap, 1e-300), 0.0)
    freqs, _ = allocate_frequencies(view, prices, bids, share)
    return PoolMarketState(view.pool_id, view.edge_ids, view.lop_ids, prices, bids, freqs, share)


@dataclass
class SinglePoolResult:
    state: PoolMarketState
    iterations: int          # number of price updates applied
    bid_updates: int         # refreshes that materially changed a bid
    skipped_refreshes: int   # refresh events skipped for zero path price
    converged: bool
    residuals: PoolResiduals
    trace: list[dict] | None = None


def _run_pool(
    view: PoolView,
    coefficients: np.ndarray,
    share: float,
    warm: PoolMarketState | None,
    cfg: DynamicsConfig,
) -> SinglePoolResult:
    if view.n_lops == 0:
        empty = PoolMarketState(
            view.pool_id, view.edge_ids, (), np.zeros(view.n_edges), np.zeros(0), np.zeros(0), share
        )
        res = PoolResiduals(0.0, 0.0, 0.0, True)
        return SinglePoolResult(empty, 0, 0, 0, True, res)

    eta = cfg.price_eta if cfg.price_eta is not None else default_price_eta(view)
    if warm is None:
        state = cold_start(view, share)
    else:
        state = warm.copy()
        state.share = share
    state.freqs, mu = allocate_frequencies(view, state.prices, state.bids, share, cfg.overload_factor)

    trace: list[dict] | None = [] if cfg.trace_stride > 0 else None
    iters = 0
    bid_updates = 0
    skipped = 0
    res = pool_residuals(view, coefficients, state, cfg.abs_tol, cfg.rel_tol)

    # convergence is only declared at bid-consistent states, i.e. right after
    # a refresh, so every clearing condition holds at one coherent state
    def settled() -> bool:
        return res.converged and iters % cfg.bid_refresh_period == 0

    while not settled() and iters < cfg.max_iters:
        loads = view.incidence @ state.freqs
        state.prices, excess = price_step(state.prices, loads, view.capacity, share, eta)
        iters += 1
        state.freqs, mu = allocate_frequencies(view, state.prices, state.bids, share, cfg.overload_factor)

        if iters % cfg.bid_refresh_period == 0:
            new_bids, skip_mask = refresh_bids(coefficients, mu, state.bids)
            skipped += int(skip_mask.sum())
            rel_change = np.abs(new_bids - state.bids) / np.maximum(state.bids, 1e-300)
            if float(rel_change.max(initial=0.0)) > cfg.rel_tol:
                bid_updates += 1
            state.bids = new_bids
            state.freqs, mu = allocate_frequencies(view, state.prices, state.bids, share, cfg.overload_factor)

        if trace is not None and iters % cfg.trace_stride == 0:
            trace.append(
                {
                    "iter": iters,
                    "max_excess": float(excess.max(initial=0.0)),
                    "v_estimate": None,  # filled against final prices below
                    "prices": state.prices.copy(),
                    "freqs": state.freqs.copy(),
                }
            )
        res = pool_residuals(view, coefficients, state, cfg.abs_tol, cfg.rel_tol)

    if trace is not None:
        final = state.prices
        for row in trace:
            gap = row.pop("prices") - final
            row["v_estimate"] = 0.5 * float(gap @ gap)
    return SinglePoolResult(state, iters, bid_updates, skipped, settled(), res, trace)


def run_single_pool(
    net: Network,
    pools: PoolSystem,
    pool_id: str,
    utilities: UtilityTable,
    share: float,
    warm: PoolMarketState | None = None,
    cfg: DynamicsConfig | None = None,
) -> SinglePoolResult:
    """Run one pool's market to its clearing point at a fixed share.

    A warm state is resumed as-is (its share is overwritten); otherwise the
    run cold-starts.  Returns the final state plus iteration accounting; a
    run that exhausts max_iters comes back with converged=False rather than
    raising.
    """
    if not 0.0 < share <= 1.0 + 1e-12:
        raise ValueError(f"share must lie in (0, 1], got {share}")
    view = compile_pool(net, pools, pool_id)
    coeffs = utilities.coefficients_for(view)
    return _run_pool(view, coeffs, share, warm, cfg or DynamicsConfig())


def run_price_dynamics(
    view: PoolView,
    prices: np.ndarray,
    bids: np.ndarray,
    share: float,
    eta: float,
    steps: int,
    overload_factor: float = _OVERLOAD,
) -> tuple[np.ndarray, np.ndarray]:
    """Price trajectory under frozen bids.

    Returns (price history with steps+1 rows, excess history with steps
    rows).  This is the inner subsystem whose distance to the frozen-bid
    clearing prices is a descent function; tests exercise exactly that.
    """
    hist = np.zeros((steps + 1, view.n_edges))
    exc = np.zeros((steps, view.n_edges))
    cur = prices.astype(float).copy()
    hist[0] = cur
    for t in range(steps):
        freqs, _ = allocate_frequencies(view, cur, bids, share, overload_factor)
        loads = view.incidence @ freqs
        cur, excess = price_step(cur, loads, view.capacity, share, eta)
        hist[t + 1] = cur
        exc[t] = excess
    return hist, exc
