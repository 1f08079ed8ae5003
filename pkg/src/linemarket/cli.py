"""Command line front end: generate, solve, oracle, recover.

A scenario JSON names an instance (either a lattice recipe or a network
file), its valuations, optional disruption, and engine settings.  Every
command takes one or more seeds; all randomness of a run flows from its
seed, split deterministically per component, so reruns with the same
scenario and seed write byte-identical files (wall-clock timings are
disabled by default for exactly that reason; --timing turns them on).

Exit codes: 0 all runs converged, 1 at least one run did not, 2 bad input.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Mapping, Sequence

from .multi_pool import MechanismConfig, MechanismResult, run_mechanism
from .network import (
    Network,
    PoolSystem,
    dump_network_file,
    load_network_file,
    validate_network,
)
from .oracle import mechanism_kkt, solve_full
from .scenarios import (
    DisruptionSpec,
    ExperimentRecord,
    GridSpec,
    child_seed,
    generate_grid,
    pool_scaled_utilities,
    run_recovery_experiment,
    uniform_utilities,
)
from .single_pool import DynamicsConfig
from .utility import UtilityTable

__all__ = ["RunConfig", "run_cli", "emit_record", "main"]

_FLOAT_FMT = "%.6g"


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved invocation: command, scenario document, overrides."""

    command: str
    scenario: dict
    out_dir: Path
    seeds: tuple[int, ...]
    mode: str
    timing: bool
    mech: MechanismConfig


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return _FLOAT_FMT % value
    return str(value)


def emit_record(record: ExperimentRecord, sink: IO[str], timing: bool = False) -> None:
    """Append one experiment record as a CSV row, header exactly once.

    The header is written when the sink is at offset zero.  Wall time is
    left blank unless timing is requested, keeping default outputs
    deterministic.
    """
    writer = csv.writer(sink, lineterminator="\n")
    if sink.tell() == 0:
        writer.writerow(
            [
                "instance",
                "mode",
                "f_updates",
                "price_updates_total",
                "price_updates",
                "bid_updates",
                "wall_time",
                "max_kkt",
                "status",
            ]
        )
    per_pool = ";".join(f"{k}:{v}" for k, v in sorted(record.price_updates.items()))
    writer.writerow(
        [
            record.instance,
            record.mode,
            record.f_updates,
            record.total_price_updates,
            per_pool,
            record.bid_updates,
            _fmt(record.wall_time) if timing else "",
            _fmt(record.max_kkt),
            record.status,
        ]
    )


# ---------------------------------------------------------------------------
# Scenario parsing.

def _parse_seeds(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in text.split(",") if part.strip() != "")
    except ValueError:
        raise ValueError(f"seeds must be a comma-separated integer list, got {text!r}") from None


def _grid_spec(doc: Mapping, seed: int) -> GridSpec:
    known = {
        "rows", "cols", "pools", "lines_per_pool", "capacity_range",
        "shared_first_edge", "min_line_len", "seed",
    }
    extra = set(doc) - known
    if extra:
        raise ValueError(f"unknown grid fields: {sorted(extra)}")
    kwargs = dict(doc)
    if "capacity_range" in kwargs:
        kwargs["capacity_range"] = tuple(float(v) for v in kwargs["capacity_range"])
    if "shared_first_edge" in kwargs:
        (a, b), (c, d) = kwargs["shared_first_edge"]
        kwargs["shared_first_edge"] = ((int(a), int(b)), (int(c), int(d)))
    kwargs.setdefault("seed", child_seed(seed, "grid"))
    return GridSpec(**kwargs)


def _build_instance(
    scn: Mapping, seed: int, base: Path
) -> tuple[Network, PoolSystem, UtilityTable]:
    if ("grid" in scn) == ("network_file" in scn):
        raise ValueError("scenario needs exactly one of 'grid' or 'network_file'")
    if "grid" in scn:
        net, pools = generate_grid(_grid_spec(scn["grid"], seed))
    else:
        net, pools = load_network_file(base / scn["network_file"])
        problems = validate_network(net, pools)
        if problems:
            listing = "; ".join(str(v) for v in problems[:8])
            raise ValueError(f"network file is structurally invalid: {listing}")

    sources = [k for k in ("utilities", "utilities_file", "utilities_gen") if k in scn]
    if len(sources) != 1:
        raise ValueError("scenario needs exactly one of 'utilities', 'utilities_file', 'utilities_gen'")
    if "utilities" in scn:
        table = UtilityTable.from_json(scn["utilities"])
    elif "utilities_file" in scn:
        table = UtilityTable.load(base / scn["utilities_file"])
    else:
        gen = scn["utilities_gen"]
        kind = gen.get("kind")
        if kind == "uniform":
            table = uniform_utilities(
                pools, float(gen["low"]), float(gen["high"]),
                int(gen.get("seed", child_seed(seed, "utilities"))),
            )
        elif kind == "pool_scale":
            table = pool_scaled_utilities(pools, float(gen["base"]), [float(s) for s in gen["scales"]])
        else:
            raise ValueError(f"unknown utilities_gen kind {kind!r}")
    table.validate_against(pools)
    return net, pools, table


def _disruption(scn: Mapping, seed: int) -> DisruptionSpec:
    if "disruption" not in scn:
        raise ValueError("recover needs a 'disruption' entry in the scenario")
    doc = scn["disruption"]
    return DisruptionSpec(
        kind=str(doc["kind"]),
        edge_count=int(doc["edge_count"]),
        magnitude=float(doc["magnitude"]),
        seed=int(doc.get("seed", child_seed(seed, "disruption"))),
    )


def _mech_config(scn: Mapping, args: argparse.Namespace) -> MechanismConfig:
    eng = dict(scn.get("engine", {}))
    known = {
        "eta_price", "eta_f", "abs_tol", "rel_tol", "eps_cost", "bid_refresh_period",
        "max_inner", "max_outer", "trace_stride", "f_floor", "normalized_f_update",
        "overload_factor",
    }
    extra = set(eng) - known
    if extra:
        raise ValueError(f"unknown engine fields: {sorted(extra)}")

    def pick(flag, key, default):
        flag_val = getattr(args, flag, None)
        if flag_val is not None:
            return flag_val
        return eng.get(key, default)

    inner = DynamicsConfig(
        price_eta=pick("eta_price", "eta_price", None),
        bid_refresh_period=int(eng.get("bid_refresh_period", 10)),
        abs_tol=float(pick("abs_tol", "abs_tol", 0.1)),
        rel_tol=float(pick("rel_tol", "rel_tol", 0.1)),
        max_iters=int(pick("max_inner", "max_inner", 50_000)),
        overload_factor=float(eng.get("overload_factor", 1.25)),
        trace_stride=int(pick("trace_stride", "trace_stride", 0)),
    )
    return MechanismConfig(
        inner=inner,
        eta_f=float(pick("eta_f", "eta_f", 0.1)),
        eps_cost=float(pick("eps_cost", "eps_cost", 0.05)),
        f_floor=float(eng.get("f_floor", 1e-4)),
        max_outer=int(pick("max_outer", "max_outer", 200)),
        normalized_f_update=bool(eng.get("normalized_f_update", True)),
    )


def _load_config(args: argparse.Namespace) -> RunConfig:
    path = Path(args.scenario)
    try:
        scn = json.loads(path.read_text(encoding="utf-8"))
    except OSError as err:
        raise ValueError(f"cannot read scenario: {err}") from None
    except json.JSONDecodeError as err:
        raise ValueError(f"scenario is not valid JSON: {err}") from None
    if not isinstance(scn, dict):
        raise ValueError("scenario must be a JSON object")

    if args.seeds is not None:
        seeds = _parse_seeds(args.seeds)
    else:
        seeds = tuple(int(s) for s in scn.get("seeds", [0]))
    if not seeds:
        raise ValueError("no seeds given")
    mode = args.mode or scn.get("mode", "both")
    if mode not in ("cold", "warm", "both"):
        raise ValueError(f"mode must be cold, warm, or both, got {mode!r}")
    return RunConfig(
        command=args.command,
        scenario=scn,
        out_dir=Path(args.out),
        seeds=seeds,
        mode=mode,
        timing=bool(args.timing),
        mech=_mech_config(scn, args),
    )


# ---------------------------------------------------------------------------
# Output writers.

def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _state_doc(res: MechanismResult) -> dict:
    st = res.state
    return {
        "converged": res.converged,
        "diagnostics": res.diagnostics,
        "shares": st.shares.as_dict(),
        "pool_costs": {k: v for k, v in sorted(st.pool_costs.items())},
        "cost_level": st.cost_level,
        "objective": res.objective,
        "f_updates": res.f_updates,
        "price_updates": dict(sorted(res.price_updates.items())),
        "bid_updates": res.bid_updates,
        "pools": {k: s.to_json() for k, s in sorted(st.pool_states.items())},
    }


def _write_outer_trace(path: Path, res: MechanismResult) -> None:
    pool_ids = sorted(res.price_updates)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            ["outer_iter"]
            + [f"share_{k}" for k in pool_ids]
            + [f"cost_{k}" for k in pool_ids]
            + ["cost_level", "price_updates_total"]
        )
        for row in res.outer_trace:
            writer.writerow(
                [row["outer_iter"]]
                + [_fmt(row["shares"][k]) for k in pool_ids]
                + [_fmt(row["costs"][k]) for k in pool_ids]
                + [_fmt(row["cost_level"]), sum(row["price_updates"].values())]
            )


def _write_inner_trace(path: Path, rows: list[dict], lop_ids: Sequence[str]) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["outer_iter", "iter", "max_excess", "v_estimate"] + [f"x_{lop}" for lop in lop_ids])
        for row in rows:
            writer.writerow(
                [row["outer_iter"], row["iter"], _fmt(row["max_excess"]), _fmt(row["v_estimate"])]
                + [_fmt(float(x)) for x in row["freqs"]]
            )


def _summary(seed: int, res: MechanismResult, max_kkt: float) -> str:
    per_pool = ";".join(f"{k}:{v}" for k, v in sorted(res.price_updates.items()))
    status = "converged" if res.converged else "nonconverged"
    return (
        f"seed={seed} status={status} f_updates={res.f_updates} "
        f"price_updates={per_pool} bid_updates={res.bid_updates} "
        f"cost_level={_fmt(res.state.cost_level)} max_kkt={_fmt(max_kkt)}"
    )


# ---------------------------------------------------------------------------
# Commands.

def _cmd_generate(cfg: RunConfig) -> int:
    base = Path(".")
    for seed in cfg.seeds:
        net, pools, table = _build_instance(cfg.scenario, seed, base)
        dump_network_file(net, pools, cfg.out_dir / f"network_seed{seed}.json")
        table.dump(cfg.out_dir / f"utilities_seed{seed}.json")
        print(
            f"seed={seed} nodes={len(net.nodes)} edges={len(net.edges)} "
            f"pools={len(pools.pool_ids)} lines={len(pools.lines)}"
        )
    return 0


def _cmd_solve(cfg: RunConfig) -> int:
    worst = 0
    for seed in cfg.seeds:
        net, pools, table = _build_instance(cfg.scenario, seed, Path("."))
        res = run_mechanism(net, pools, table, cfg.mech)
        max_kkt = mechanism_kkt(net, pools, table, res.state).max_scaled()
        _write_json(cfg.out_dir / f"state_seed{seed}.json", _state_doc(res))
        _write_outer_trace(cfg.out_dir / f"outer_trace_seed{seed}.csv", res)
        for k, rows in sorted(res.inner_traces.items()):
            lop_ids = res.state.pool_states[k].lop_ids
            _write_inner_trace(cfg.out_dir / f"inner_trace_seed{seed}_{k}.csv", rows, lop_ids)
        name = cfg.scenario.get("name", "run")
        record = ExperimentRecord(
            instance=f"{name}-s{seed}",
            mode="cold",
            f_updates=res.f_updates,
            price_updates=dict(res.price_updates),
            bid_updates=res.bid_updates,
            wall_time=res.wall_time,
            max_kkt=max_kkt,
            status="converged" if res.converged else "nonconverged",
        )
        with (cfg.out_dir / "records.csv").open("a", newline="", encoding="utf-8") as fh:
            emit_record(record, fh, timing=cfg.timing)
        print(_summary(seed, res, max_kkt))
        if not res.converged:
            worst = 1
    return worst


def _cmd_oracle(cfg: RunConfig) -> int:
    worst = 0
    for seed in cfg.seeds:
        net, pools, table = _build_instance(cfg.scenario, seed, Path("."))
        sol = solve_full(net, pools, table)
        doc = {
            "objective": sol.objective,
            "shares": sol.shares,
            "cost_level": sol.cost_level,
            "cost_gap": sol.cost_gap,
            "converged": sol.converged,
            "frequencies": [
                {"lop": lop, "pool": k, "x": x} for (lop, k), x in sorted(sol.frequencies.items())
            ],
            "prices": [
                {"edge": e, "pool": k, "price": v} for (e, k), v in sorted(sol.prices.items())
            ],
            "max_kkt": sol.kkt.max_scaled(),
        }
        _write_json(cfg.out_dir / f"oracle_seed{seed}.json", doc)
        print(
            f"seed={seed} objective={_fmt(sol.objective)} "
            f"shares={';'.join(f'{k}:{_fmt(v)}' for k, v in sorted(sol.shares.items()))} "
            f"cost_level={_fmt(sol.cost_level)}"
        )
        if not sol.converged:
            worst = 1
    return worst


def _cmd_recover(cfg: RunConfig) -> int:
    worst = 0
    name = cfg.scenario.get("name", "run")
    record_path = cfg.out_dir / "records.csv"
    for seed in cfg.seeds:
        net, pools, table = _build_instance(cfg.scenario, seed, Path("."))
        spec = _disruption(cfg.scenario, seed)
        modes = ("cold", "warm") if cfg.mode == "both" else (cfg.mode,)
        try:
            result = run_recovery_experiment(
                net, pools, table, spec, cfg.mech,
                instance=f"{name}-s{seed}", modes=modes,
            )
        except (RuntimeError, ValueError) as err:
            print(f"seed={seed} error: {err}", file=sys.stderr)
            worst = 1
            continue
        records = result.records()
        with record_path.open("a", newline="", encoding="utf-8") as fh:
            for rec in records:
                emit_record(rec, fh, timing=cfg.timing)
        for rec in records:
            print(
                f"seed={seed} mode={rec.mode} status={rec.status} "
                f"f_updates={rec.f_updates} price_updates={rec.total_price_updates} "
                f"bid_updates={rec.bid_updates} max_kkt={_fmt(rec.max_kkt)}"
            )
            if rec.status != "converged":
                worst = 1
    return worst


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="linemarket",
        description="Decentralized capacity pricing for railway line pools.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in (
        ("generate", "write network and valuation files for a scenario"),
        ("solve", "run the mechanism cold and write state, traces, records"),
        ("oracle", "solve the centralized reference problem"),
        ("recover", "disrupt a converged instance and compare warm vs cold restarts"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--scenario", required=True, help="scenario JSON path")
        p.add_argument("--out", default=".", help="output directory (default: current)")
        p.add_argument("--seeds", default=None, help="comma-separated seeds, overrides the scenario")
        p.add_argument("--mode", default=None, choices=["cold", "warm", "both"])
        p.add_argument("--eta-price", type=float, default=None, dest="eta_price")
        p.add_argument("--eta-f", type=float, default=None, dest="eta_f")
        p.add_argument("--abs-tol", type=float, default=None, dest="abs_tol")
        p.add_argument("--rel-tol", type=float, default=None, dest="rel_tol")
        p.add_argument("--eps-cost", type=float, default=None, dest="eps_cost")
        p.add_argument("--max-inner", type=int, default=None, dest="max_inner")
        p.add_argument("--max-outer", type=int, default=None, dest="max_outer")
        p.add_argument("--trace-stride", type=int, default=None, dest="trace_stride")
        p.add_argument("--timing", action="store_true", help="record wall-clock times (breaks byte reproducibility)")
    return parser


def run_cli(argv: Sequence[str]) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return 2 if err.code not in (0, None) else 0
    try:
        cfg = _load_config(args)
        cfg.out_dir.mkdir(parents=True, exist_ok=True)
        handler = {
            "generate": _cmd_generate,
            "solve": _cmd_solve,
            "oracle": _cmd_oracle,
            "recover": _cmd_recover,
        }[cfg.command]
        return handler(cfg)
    except (ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run_cli(sys.argv[1:]))
