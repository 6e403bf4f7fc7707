"""Command line entry point ``tcost-lab``."""
from __future__ import annotations

import argparse
import json
import sys

from .cps import Q_MIN, critical_kappa, extract_cps, propagate_bands, verify_martingale
from .dp import GridSpec, extract_strategy, solve
from .experiment import ExperimentConfig, ExperimentError, config_template, run
from .market import ScenarioTree, spec_from_dict
from .mz import coupled_mz_distance
from .oracle import TradeGrid, enumerate_optimal, solve_continuous
from .utility import UtilitySpec
from .wealth import FrictionParams, liquidation_value


def _load_tree(path: str) -> ScenarioTree:
    with open(path) as fh:
        return ScenarioTree.from_json(fh.read())


def _print(obj):
    json.dump(obj, sys.stdout, sort_keys=True, indent=2)
    sys.stdout.write("\n")


def cmd_run(args) -> int:
    cfg = ExperimentConfig.from_json(args.config)
    overrides = {}
    if args.seeds is not None:
        overrides["seeds"] = args.seeds
    if args.suboptimality is not None:
        overrides["suboptimality"] = args.suboptimality
    if overrides:
        cfg = ExperimentConfig.from_dict(dict(cfg.to_dict(), **overrides))
    try:
        report = run(cfg, out=args.out, jobs=args.jobs)
    except ExperimentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    failed = [k for k, v in report["invariants"].items() if not v]
    if failed:
        print(f"invariants failed: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def cmd_solve(args) -> int:
    tree = _load_tree(args.tree)
    utility = UtilitySpec.parse(args.utility)
    params = FrictionParams(args.kappa)
    grid = GridSpec(n_points=args.grid, pi_min=args.pi_min, pi_max=args.pi_max)
    sol = solve(tree, utility, args.x, params, grid)
    pb, ps = sol.no_trade_interval(0)
    out = {
        "value": sol.value_at(args.x),
        "no_trade_root": [pb, ps],
        "n_nodes": tree.n_nodes,
        "recombining": tree.recombining,
    }
    if not tree.recombining:
        strat = extract_strategy(sol, tree, args.x)
        out["strategy"] = strat.to_dict()
        if args.ledger:
            with open(args.ledger, "w") as fh:
                fh.write(liquidation_value(tree, strat, params, args.x).to_csv())
    _print(out)
    return 0


def cmd_cps(args) -> int:
    tree = _load_tree(args.tree)
    eps = args.kappa / 2.0 if args.eps is None else args.eps
    if not 0.0 < eps < args.kappa:
        print("error: eps must lie in (0, kappa)", file=sys.stderr)
        return 2
    ke = args.kappa - eps
    bands = propagate_bands(tree, ke, args.q_min)
    kc = critical_kappa(tree, args.q_min)
    out = {
        "kappa": args.kappa,
        "eps": eps,
        "kappa_eff": ke,
        "feasible": bands.feasible,
        "critical_kappa": kc,
        "max_eps": max(args.kappa - kc, 0.0),
    }
    if bands.feasible:
        system = extract_cps(tree, bands, anchor=args.anchor)
        out.update(system.to_dict())
        out["residual_report"] = verify_martingale(tree, system, ke).to_dict()
    else:
        out["witness_node"] = bands.witness
    _print(out)
    return 0 if bands.feasible else 1


def cmd_mz(args) -> int:
    with open(args.spec) as fh:
        d = json.load(fh)
    if "market" in d:
        market = spec_from_dict(d["market"])
        utility = UtilitySpec.parse(d.get("utility", args.utility))
        x = float(d.get("x", args.x))
        kappa = float(d.get("kappa", args.kappa))
    else:
        market = spec_from_dict(d)
        utility, x, kappa = UtilitySpec.parse(args.utility), args.x, args.kappa
    est = coupled_mz_distance(
        market, utility, x, FrictionParams(kappa), args.n, args.seeds,
        seed=args.seed, suboptimality=args.suboptimality,
    )
    _print(dict(est.to_dict(), n_next=2 * args.n))
    return 0


def cmd_oracle(args) -> int:
    tree = _load_tree(args.tree)
    utility = UtilitySpec.parse(args.utility)
    params = FrictionParams(args.kappa)
    grid = TradeGrid(delta=args.grid_delta, refine=args.refine, levels=args.levels)
    res = enumerate_optimal(tree, utility, args.x, params, grid)
    out = {
        "best": res.best,
        "n_optimal": len(res.argmax),
        "n_admissible": res.n_admissible,
        "n_total": res.n_total,
        "strategy": {str(v): float(g) for v, g in enumerate(res.strategies[res.argmax[0]])},
    }
    if args.continuous:
        value, _ = solve_continuous(tree, utility, args.x, params)
        out["continuous_value"] = value
    _print(out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tcost-lab", description="Utility maximization under proportional costs on finite trees.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a refinement study from a JSON config")
    r.add_argument("--config", required=True)
    r.add_argument("--out", default=None)
    r.add_argument("--seeds", type=int, default=None, help="Monte-Carlo sample count")
    r.add_argument("--jobs", type=int, default=1)
    r.add_argument("--suboptimality", type=float, default=None,
                   help="widen the no-trade intervals by this amount before the distance study")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("solve", help="solve one tree by backward induction")
    s.add_argument("--tree", required=True)
    s.add_argument("--utility", default="log", help="log or power:p")
    s.add_argument("--x", type=float, default=1.0)
    s.add_argument("--kappa", type=float, required=True)
    s.add_argument("--grid", type=int, default=65, help="tabulation points per node")
    s.add_argument("--pi-min", type=float, default=-0.5)
    s.add_argument("--pi-max", type=float, default=3.0)
    s.add_argument("--ledger", default=None, help="write the wealth ledger CSV here")
    s.set_defaults(func=cmd_solve)

    c = sub.add_parser("cps-check", help="certify a consistent price system")
    c.add_argument("--tree", required=True)
    c.add_argument("--kappa", type=float, required=True)
    c.add_argument("--eps", type=float, default=None, help="defaults to kappa/2")
    c.add_argument("--q-min", type=float, default=Q_MIN)
    c.add_argument("--anchor", choices=("mid", "price"), default="mid")
    c.set_defaults(func=cmd_cps)

    m = sub.add_parser("mz-dist", help="coupled Meyer-Zheng distance between levels n and 2n")
    m.add_argument("--spec", required=True, help="market spec JSON, or a run config")
    m.add_argument("--n", type=int, required=True)
    m.add_argument("--seeds", type=int, default=2000)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--utility", default="log")
    m.add_argument("--x", type=float, default=1.0)
    m.add_argument("--kappa", type=float, default=0.01)
    m.add_argument("--suboptimality", type=float, default=0.0)
    m.set_defaults(func=cmd_mz)

    o = sub.add_parser("oracle", help="brute-force optimum over a trade grid")
    o.add_argument("--tree", required=True)
    o.add_argument("--utility", default="log")
    o.add_argument("--x", type=float, default=1.0)
    o.add_argument("--kappa", type=float, required=True)
    o.add_argument("--grid-delta", type=float, default=0.25, help="trade step as a fraction of x/S0")
    o.add_argument("--refine", type=int, default=1)
    o.add_argument("--levels", type=int, default=2)
    o.add_argument("--continuous", action="store_true", help="also solve the continuous program")
    o.set_defaults(func=cmd_oracle)

    t = sub.add_parser("template", help="print an example run config")
    t.set_defaults(func=lambda args: _print(config_template()) or 0)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
