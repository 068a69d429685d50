"""Command-line front end: run any method on a case and emit report tables.

Subcommands
-----------
coordinate   run the response-function coordination, write per-interface report
centralized  solve the weighted centralized TDOPF
app          run the APP decomposition baseline
compare      run everything and emit the three comparison tables
opf          solve a single network's OPF standalone (debugging, oracles)

Exit codes: 0 success, 2 configuration error, 3 solver/coordination failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from .acopf import BuildError, ObjectiveSpec, build_topf, solution_from_nlp
from .baselines import (
    AppConfig, BaselineError, WeightConfig, run_app, solve_centralized,
)
from .coordination import (
    CoordinationError, FeederInfeasibleError, run_coordination, write_trace_jsonl,
)
from .netcase import ConfigError, McaseParseError, load_integrated_case, parse_mcase
from .nlp import SolveOptions, solve

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3


def _fmt_power(x):
    return f"{x:.4f}"


def _fmt_money(x):
    return f"{x:.2f}"


def _vector(vals, fmt=_fmt_power):
    return "[" + "; ".join(fmt(v) for v in vals) + "]"


def _write_table(path: Path, header, rows, fmt):
    if fmt == "markdown":
        lines = ["| " + " | ".join(header) + " |",
                 "|" + "|".join(" --- " for _ in header) + "|"]
        lines += ["| " + " | ".join(str(c) for c in row) + " |" for row in rows]
        path.with_suffix(".md").write_text("\n".join(lines) + "\n")
    else:
        with open(path.with_suffix(".csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(rows)


def _write_meta(out: Path, args, extra=None):
    meta = {"case": str(args.case), "command": args.command, "seed": args.seed,
            "alpha": getattr(args, "alpha", None),
            "tol": getattr(args, "tol", None)}
    if extra:
        meta.update(extra)
    (out / "run_meta.json").write_text(json.dumps(meta, indent=2) + "\n")


def _load_case(args):
    case = load_integrated_case(args.case)
    if args.alpha is not None or args.tol is not None:
        import dataclasses
        case = dataclasses.replace(
            case,
            alpha=case.alpha if args.alpha is None else args.alpha,
            mismatch_tol=case.mismatch_tol if args.tol is None else args.tol)
    return case


def _weight_list(args):
    if not args.weights:
        return [WeightConfig(1.0, 1.0)]
    return [WeightConfig(w[0], w[1]) for w in args.weights]


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_coordinate(args) -> int:
    case = _load_case(args)
    options = SolveOptions(verbose=1 if args.verbose else 0)
    result = run_coordination(case, options=options)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "coordination.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["interface_bus", "v_b_t_pu", "p_b_d_mw", "q_b_d_mvar",
                    "mismatch_p_mw", "mismatch_q_mvar", "c_d_feeder",
                    "c_t_mw", "c_d_total", "exchange_count", "step6_invoked",
                    "voltage_deviation"])
        for o, c_d in zip(result.interfaces, result.c_d_per_feeder):
            w.writerow([o.interface_bus, repr(o.v_b_t), repr(o.p_b_d), repr(o.q_b_d),
                        repr(o.mismatch_p), repr(o.mismatch_q), repr(c_d),
                        repr(result.c_t), repr(result.c_d_total),
                        result.exchange_count, result.step6_invoked,
                        result.voltage_deviation])
    write_trace_jsonl(out / "trace.jsonl", result)
    _write_meta(out, args)
    print(f"coordination: {result.exchange_count} exchange(s), "
          f"c_T = {_fmt_power(result.c_t)} MW, c_D = {_fmt_money(result.c_d_total)} $")
    for o in result.interfaces:
        print(f"  bus {o.interface_bus}: V_B,T = {o.v_b_t:.4f} pu, "
              f"P_B,D = {_fmt_power(o.p_b_d)} MW, Q_B,D = {_fmt_power(o.q_b_d)} Mvar")
    return EXIT_OK


def cmd_centralized(args) -> int:
    case = _load_case(args)
    weights = _weight_list(args)[0]
    options = SolveOptions(verbose=1 if args.verbose else 0)
    result = solve_centralized(case, weights, options)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "centralized.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["w_t", "w_d", "c_t_mw", "c_d_total", "weighted_objective",
                    "iterations"])
        w.writerow([weights.w_t, weights.w_d, repr(result.c_t),
                    repr(result.c_d_total), repr(result.weighted_objective),
                    result.nlp.iterations])
    _write_meta(out, args, {"weights": [weights.w_t, weights.w_d]})
    print(f"centralized ({weights.label()}): c_T = {_fmt_power(result.c_t)} MW, "
          f"c_D = {_fmt_money(result.c_d_total)} $, "
          f"objective = {_fmt_money(result.weighted_objective)}")
    return EXIT_OK


def cmd_app(args) -> int:
    case = _load_case(args)
    weights = _weight_list(args)[0]
    cfg = AppConfig(max_outer=args.app_max_outer)
    options = SolveOptions(verbose=1 if args.verbose else 0)
    result = run_app(case, weights, cfg, options=options)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "app_history.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "max_boundary_gap_pu", "weighted_objective"])
        for it, gap, obj in result.residual_history:
            w.writerow([it, repr(gap), repr(obj)])
    _write_meta(out, args, {"weights": [weights.w_t, weights.w_d],
                            "converged": result.converged})
    status = "converged" if result.converged else "NOT converged"
    print(f"APP ({weights.label()}): {status} in {result.outer_iterations} "
          f"exchanges, objective = {_fmt_money(result.weighted_objective)}")
    return EXIT_OK if result.converged else EXIT_SOLVER


def cmd_compare(args) -> int:
    case = _load_case(args)
    weight_list = _weight_list(args)
    options = SolveOptions(verbose=1 if args.verbose else 0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tracef = open(out / "compare_trace.jsonl", "w")

    def trace(record):
        tracef.write(json.dumps(record) + "\n")

    failures = []
    central = {}
    for w in weight_list:
        try:
            central[w] = solve_centralized(case, w, options)
            trace({"method": f"centralized[{w.label()}]",
                   "c_t": central[w].c_t, "c_d": central[w].c_d_total,
                   "objective": central[w].weighted_objective,
                   "iterations": central[w].nlp.iterations})
        except BaselineError as exc:
            failures.append(f"centralized[{w.label()}]: {exc}")
            central[w] = None

    try:
        coord = run_coordination(case, options=options)
        trace({"method": "proposed", "c_t": coord.c_t, "c_d": coord.c_d_total,
               "exchanges": coord.exchange_count})
    except (CoordinationError, FeederInfeasibleError) as exc:
        failures.append(f"proposed: {exc}")
        coord = None

    app = {}
    for w in weight_list:
        try:
            app[w] = run_app(case, w, AppConfig(max_outer=args.app_max_outer),
                             options=options)
            trace({"method": f"app[{w.label()}]", "converged": app[w].converged,
                   "iterations": app[w].outer_iterations,
                   "objective": app[w].weighted_objective})
        except BaselineError as exc:
            failures.append(f"app[{w.label()}]: {exc}")
            app[w] = None

    # table1: dispatch and boundary state per method
    rows = []
    for w in weight_list:
        res = central[w]
        if res is None:
            rows.append([f"Central. ({w.label()})"] + ["failed"] * 5)
            continue
        rows.append(_dispatch_row(f"Central. ({w.label()})", case,
                                  res.t_solution, res.d_solutions,
                                  res.c_t, res.c_d_total))
    if coord is not None:
        rows.append(_dispatch_row(f"Proposed (alpha={case.alpha:g})", case,
                                  coord.t_solution, coord.d_solutions,
                                  coord.c_t, coord.c_d_total))
    else:
        rows.append(["Proposed"] + ["failed"] * 5)
    _write_table(out / "table1", ["Method", "P_TG (MW)", "P_DG (MW)", "P_B (MW)",
                                  "Q_B (Mvar)", "c_T (MW)", "c_D ($)"][:len(rows[0]) + 1],
                 rows, args.format)

    # table2: every solution cross-evaluated under every weight vector
    rows = []
    for name, sol in [(f"Central. ({w.label()})", central[w]) for w in weight_list] \
            + [("Proposed", coord)]:
        if sol is None:
            rows.append([name] + ["failed"] * len(weight_list))
            continue
        row = [name]
        for w in weight_list:
            row.append(_fmt_money(w.w_t * sol.c_t + w.w_d * sol.c_d_total))
        rows.append(row)
    _write_table(out / "table2", ["Solution"] + [w.label() for w in weight_list],
                 rows, args.format)

    # table3: TSO-DSO exchange counts per method
    rows = []
    for w in weight_list:
        res = app[w]
        rows.append([f"APP ({w.label()})",
                     "failed" if res is None else res.outer_iterations])
    rows.append(["Proposed", "failed" if coord is None else coord.exchange_count])
    _write_table(out / "table3", ["Method", "TSO-DSO exchanges"], rows, args.format)

    tracef.close()
    _write_meta(out, args, {"weights": [[w.w_t, w.w_d] for w in weight_list],
                            "failures": failures})
    print(f"compare: wrote table1/table2/table3 ({args.format}) to {out}")
    for line in failures:
        print(f"  FAILED {line}", file=sys.stderr)
    return EXIT_SOLVER if failures else EXIT_OK


def _dispatch_row(name, case, t_sol, d_sols, c_t, c_d):
    tg = _vector(t_sol.pg)
    dg = " | ".join(
        _vector([p for i, p in enumerate(sol.pg)
                 if feeder.network.generators[i].bus != feeder.network.slack_bus])
        for feeder, sol in zip(case.feeders, d_sols))
    p_b, q_b = [], []
    for feeder, sol in zip(case.feeders, d_sols):
        for i, g in enumerate(feeder.network.generators):
            if g.bus == feeder.network.slack_bus:
                p_b.append(sol.pg[i])
                q_b.append(sol.qg[i])
                break
    return [name, tg, dg, _vector(p_b), _vector(q_b),
            _fmt_power(c_t), _fmt_money(c_d)]


def cmd_opf(args) -> int:
    net = parse_mcase(Path(args.case).read_text(), name=Path(args.case).stem)
    objective = ObjectiveSpec(kind="generation_cost") \
        if args.objective == "cost" else None
    options = SolveOptions(verbose=1 if args.verbose else 0)
    sol = solve(build_topf(net, objective=objective), options)
    if sol.status != "optimal":
        print(f"opf: solver returned {sol.status}", file=sys.stderr)
        return EXIT_SOLVER
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    vars_ = solution_from_nlp(net, sol.x)
    with open(out / "opf.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bus", "v_pu", "theta_rad"])
        for b, v, t in zip(net.buses, vars_.v, vars_.theta):
            w.writerow([b.id, repr(v), repr(t)])
        w.writerow([])
        w.writerow(["gen_bus", "pg_mw", "qg_mvar"])
        for g, p, q in zip(net.generators, vars_.pg, vars_.qg):
            w.writerow([g.bus, repr(p), repr(q)])
    _write_meta(out, args)
    print(f"opf: objective = {sol.objective_value:.6f} "
          f"({'generation cost $' if args.objective == 'cost' else 'loss MW'}), "
          f"{sol.iterations} iterations")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tdopf",
        description="Transmission-distribution coordinated AC OPF laboratory")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (("coordinate", cmd_coordinate), ("centralized", cmd_centralized),
                     ("app", cmd_app), ("compare", cmd_compare), ("opf", cmd_opf)):
        p = sub.add_parser(name)
        p.add_argument("case", help="integrated case JSON (or M-case file for opf)")
        p.add_argument("--alpha", type=float, default=None,
                       help="perturbation half-width override")
        p.add_argument("--weights", type=float, nargs=2, action="append",
                       metavar=("WT", "WD"), help="objective weights (repeatable)")
        p.add_argument("--tol", type=float, default=None,
                       help="boundary mismatch tolerance override (p.u.)")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--format", choices=("csv", "markdown"), default="csv")
        p.add_argument("--seed", type=int, default=0,
                       help="recorded for reproducibility bookkeeping")
        p.add_argument("--verbose", action="store_true")
        p.add_argument("--app-max-outer", type=int, default=500,
                       help="outer-iteration cap for the APP baseline")
        p.set_defaults(func=fn)
    sub.choices["opf"].add_argument("--objective", choices=("loss", "cost"),
                                    default="loss")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, McaseParseError, BuildError, FileNotFoundError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CoordinationError, FeederInfeasibleError, BaselineError) as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
