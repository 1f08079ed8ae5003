"""Decentralized capacity pricing for railway line planning.

Line operators bid for train frequencies on their lines; a network operator
prices edge capacity inside each line pool and steers the cross-pool
capacity split until every pool is equally expensive.  The package bundles
the market engines, a centralized reference solver for certification, and a
reproducible experiment harness around capacity disruptions.
"""
from .network import (
    Edge,
    EdgeLoad,
    InputMismatchError,
    Line,
    Network,
    PoolSystem,
    PoolView,
    Violation,
    compile_pool,
    dump_network_file,
    edge_loads,
    load_network_file,
    network_from_json,
    network_to_json,
    path_price,
    validate_network,
)
from .utility import (
    UtilitySpec,
    UtilityTable,
    best_response_bid,
    marginal_utility,
    utility,
)
from .single_pool import (
    DynamicsConfig,
    PoolMarketState,
    SinglePoolResult,
    allocate_frequencies,
    cold_start,
    default_price_eta,
    price_step,
    refresh_bids,
    run_price_dynamics,
    run_single_pool,
)
from .multi_pool import (
    MechanismConfig,
    MechanismResult,
    OuterState,
    ProportionVector,
    costs_equal,
    pool_cost,
    run_mechanism,
    update_proportions,
)
from .oracle import (
    FixedShareSolution,
    KKTReport,
    OracleSolution,
    UnsupportedSizeError,
    kkt_report,
    mechanism_kkt,
    solve_fixed_bids,
    solve_fixed_f,
    solve_full,
)
from .scenarios import (
    DisruptionSpec,
    ExperimentRecord,
    GridSpec,
    RecoveryResult,
    apply_disruption,
    congested_edges,
    generate_grid,
    perturb_pool,
    pool_scaled_utilities,
    run_recovery_experiment,
    uniform_utilities,
)

__version__ = "0.1.0"
