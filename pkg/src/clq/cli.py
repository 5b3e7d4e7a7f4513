"""Command-line front end.

Every subcommand reads one JSON problem file and writes ``result.json`` plus
CSV series into ``--out``. Exit status: 0 success, 2 when the stationary
equations have no solution, 1 on any error. Diagnostics go to stderr as one
JSON object per line.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, meanvar, qp
from ._io import write_json
from .config import parse_config
from .errors import ClqError
from .finite_horizon import (
    PiecewisePolicy,
    ProblemData,
    RiccatiSolution,
    export_gain_schedule,
    solve_riccati_pair,
)
from .infinite_horizon import (
    NoSolutionReport,
    StationaryOptions,
    StationaryProblem,
    StationarySolution,
    scan_F,
    solve_stationary,
)
from .meanvar import MvProblem
from .simulate import SimConfig, estimate_value, simulate_paths

EXIT_OK, EXIT_ERROR, EXIT_NO_SOLUTION = 0, 1, 2

log = logging.getLogger("clq")


class _JsonLines(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        return json.dumps({"level": record.levelname.lower(), "source": record.name,
                           "message": record.getMessage()})


def _diag(level: str, **fields) -> None:
    print(json.dumps({"level": level, **fields}), file=sys.stderr)


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _expect(prob, kinds, command):
    if not isinstance(prob, kinds):
        names = "/".join(k.__name__ for k in kinds)
        raise ClqError(f"{command} needs a {names} config, got {type(prob).__name__}")
    return prob


def _options(args) -> StationaryOptions:
    return StationaryOptions(root_tol=args.tol, ridge=args.ridge) if args.tol else StationaryOptions(ridge=args.ridge)


# subcommands

def cmd_solve_finite(args) -> int:
    data = _expect(parse_config(args.config, args.grid), (ProblemData,), "solve-finite")
    sol = solve_riccati_pair(data, args.ridge)
    out = _out(args)
    export_gain_schedule(sol, out / "gains.csv")
    write_json({"status": "ok", "command": "solve-finite", "g_hat_0": float(sol.g_hat[0]),
                "g_bar_0": float(sol.g_bar[0]), "k_hat_0": sol.k_hat[0].tolist(),
                "k_bar_0": sol.k_bar[0].tolist(), "solution": sol.to_dict()}, out / "result.json")
    return EXIT_OK


def _no_solution(report: NoSolutionReport, out: Path, command: str, write_scan: bool = True) -> int:
    if write_scan:
        report.scan.to_csv(out / "scan.csv")
    write_json({"command": command, **report.to_dict()}, out / "result.json")
    _diag("info", event="no_solution",
          message="F_hat and F_bar have no root on the scanned range" if not (report.hat.converged or report.bar.converged)
          else f"no root for branch {'hat' if not report.hat.converged else 'bar'}")
    return EXIT_NO_SOLUTION


def cmd_solve_stationary(args) -> int:
    prob = _expect(parse_config(args.config), (StationaryProblem,), "solve-stationary")
    res = solve_stationary(prob, _options(args))
    out = _out(args)
    if isinstance(res, NoSolutionReport):
        return _no_solution(res, out, "solve-stationary")
    write_json({"status": "ok", "command": "solve-stationary", "solution": res.to_dict()}, out / "result.json")
    return EXIT_OK


def cmd_scan_f(args) -> int:
    prob = _expect(parse_config(args.config), (StationaryProblem,), "scan-F")
    opts = _options(args)
    if args.linear:
        g = np.linspace(args.g_min, args.g_max, args.points)
    else:
        g = np.logspace(np.log10(args.g_min), np.log10(args.g_max), args.points)
    scan = scan_F(prob, g, opts)
    out = _out(args)
    scan.to_csv(out / "scan.csv")
    res = solve_stationary(prob, opts)
    if isinstance(res, NoSolutionReport):
        return _no_solution(res, out, "scan-F", write_scan=False)
    write_json({"status": "ok", "command": "scan-F", "solution": res.to_dict(),
                "sign_changes": {"hat": scan.sign_changes("hat"), "bar": scan.sign_changes("bar")}},
               out / "result.json")
    return EXIT_OK


def cmd_simulate(args) -> int:
    prob = _expect(parse_config(args.config, args.grid), (ProblemData, StationaryProblem), "simulate")
    if isinstance(prob, StationaryProblem):
        res = solve_stationary(prob, _options(args))
        if isinstance(res, NoSolutionReport):
            return _no_solution(res, _out(args), "simulate")
        policy, horizon = res, args.horizon or 2.0
        reference = res.g_hat_star if args.x0 >= 0 else res.g_bar_star
    else:
        sol = solve_riccati_pair(prob, args.ridge)
        policy, horizon = PiecewisePolicy(sol), args.horizon or prob.horizon
        reference = float(sol.g_hat[0] if args.x0 >= 0 else sol.g_bar[0])
    cfg = SimConfig(args.paths, args.dt or min(1e-4 if horizon <= 1 else 1e-3, horizon), horizon,
                    args.seed, args.antithetic, args.x0, min(args.traces, args.paths))
    ens = simulate_paths(prob, policy, cfg)
    mean, se = estimate_value(ens)
    out = _out(args)
    ens.moments_csv(out / "moments.csv")
    if cfg.record_paths:
        ens.traces_csv(out / "traces.csv")
    write_json({"status": "ok", "command": "simulate", "cost_mean": mean, "cost_std_error": se,
                "reference_value": reference * args.x0 ** 2, "overflow_count": ens.overflow_count,
                "max_violation": ens.max_violation, "paths": cfg.num_paths, "dt": cfg.horizon / cfg.steps,
                "horizon": horizon, "seed": args.seed}, out / "result.json")
    return EXIT_OK


def _mv(args) -> MvProblem:
    return _expect(parse_config(args.config, args.grid), (MvProblem,), "mean-variance commands")


def cmd_mv_solve(args) -> int:
    prob = _mv(args)
    sol = meanvar.solve_mv(prob, args.ridge)
    out = _out(args)
    sol.gains_csv(out / "gains.csv")
    write_json({"status": "ok", "command": "mv-solve", "solution": sol.to_dict()}, out / "result.json")
    return EXIT_OK


def _targets(args, prob) -> list:
    if args.targets:
        return [float(v) for v in args.targets.split(",")]
    raw = json.loads(Path(args.config).read_text()).get("targets")
    return list(raw) if raw else [prob.target]


def cmd_mv_frontier(args) -> int:
    prob = _mv(args)
    sol = meanvar.solve_mv(prob, args.ridge)
    targets = _targets(args, prob)
    base = meanvar.default_frontier_sim(prob)
    sim = SimConfig(args.paths or base.num_paths, args.dt or base.dt, prob.horizon,
                    base.seed if args.seed is None else args.seed, True, prob.x0)
    points = meanvar.efficient_frontier(prob, targets, sim, sol)
    bench = meanvar.buy_and_hold(prob, targets)
    out = _out(args)
    meanvar.frontier_csv(points, out / "frontier.csv", bench)
    for p in points:
        if p.negative_variance:
            _diag("warning", event="negative_variance", target=p.target,
                  message="Monte Carlo penalty exceeds the analytic term by more than 3 standard errors")
    write_json({"status": "ok", "command": "mv-frontier", "lambda_star": sol.lambda_star,
                "points": [{"target": p.target, "variance": p.variance, "std_dev": p.std_dev,
                            "mc_std_error": p.mc_std_error, "analytic": p.analytic, "penalty": p.penalty,
                            "negative_variance": p.negative_variance,
                            "benchmark_std_dev": b.std_dev} for p, b in zip(points, bench)]},
               out / "result.json")
    return EXIT_OK


def cmd_mv_benchmark(args) -> int:
    prob = _mv(args)
    bench = meanvar.buy_and_hold(prob, _targets(args, prob))
    sol = meanvar.solve_mv(prob, args.ridge)
    main_bench = meanvar.buy_and_hold(prob)[0]
    times, dyn, bh = meanvar.wealth_paths(sol, max(1, args.traces), args.dt, args.seed or 0, main_bench)
    out = _out(args)
    meanvar.wealth_csv(times, dyn, bh, out / "wealth.csv")
    write_json({"status": "ok", "command": "mv-benchmark",
                "benchmark": [{"target": b.target, "holdings": b.holdings.tolist(), "mean": b.mean,
                               "variance": b.variance, "std_dev": b.std_dev} for b in bench]},
               out / "result.json")
    return EXIT_OK


def cmd_check_feasibility(args) -> int:
    prob = parse_config(args.config, args.grid, validate=False)
    label = "Assumption 3" if isinstance(prob, StationaryProblem) else "Assumption 1"
    if isinstance(prob, StationaryProblem):
        regions = [prob.region]
    elif isinstance(prob, ProblemData):
        regions = [qp.Polyhedron(prob.H[i], prob.d[i]) for i in range(prob.knots.size)]
    else:
        regions = [qp.Polyhedron(-prob.H[i], np.zeros(prob.H.shape[1])) for i in range(prob.knots.size)]
    reports = [qp.check_feasibility(r) for r in regions]
    ok = all(r.feasible for r in reports)
    write_json({"status": "ok" if ok else "infeasible", "command": "check-feasibility",
                "knots": [r.to_dict() for r in reports]}, _out(args) / "result.json")
    for i, r in enumerate(reports):
        if not r.feasible:
            _diag("error", type="Infeasible", assumption=label, index=i,
                  message="control constraint set {K : HK <= d} is empty")
        elif not r.assumption_feasible:
            _diag("warning", assumption=label, index=i,
                  message="{K : HK <= d, HK <= 0} is empty")
    return EXIT_OK if ok else EXIT_ERROR


COMMANDS = {
    "solve-finite": (cmd_solve_finite, "integrate the constrained Riccati pair on [0, T]"),
    "solve-stationary": (cmd_solve_stationary, "solve the stationary (infinite-horizon) equations"),
    "scan-F": (cmd_scan_f, "tabulate F_hat and F_bar on a grid and report roots"),
    "simulate": (cmd_simulate, "Monte Carlo rollout of the optimal closed loop"),
    "mv-solve": (cmd_mv_solve, "mean-variance multiplier, gains and Gbar rho^2 margins"),
    "mv-frontier": (cmd_mv_frontier, "efficient frontier and buy-and-hold comparator"),
    "mv-benchmark": (cmd_mv_benchmark, "buy-and-hold holdings and sample wealth paths"),
    "check-feasibility": (cmd_check_feasibility, "report constraint-set nonemptiness per knot"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("config", help="problem definition (JSON, schema_version 1)")
    common.add_argument("--out", default=".", help="output directory (default: current)")
    common.add_argument("--grid", type=int, metavar="N", help="number of integration steps on [0, T]")
    common.add_argument("--tol", type=float, metavar="X", help="root tolerance for stationary solves")
    common.add_argument("--seed", type=int, metavar="S", help="random seed")
    common.add_argument("--paths", type=int, metavar="P", help="Monte Carlo paths")
    common.add_argument("--ridge", action="store_true", help="add a small ridge to every inner QP")
    common.add_argument("--debug", action="store_true", help="re-raise errors with a traceback")

    parser = argparse.ArgumentParser(prog="clq", description="Constrained stochastic LQ solvers.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    parsers = {name: sub.add_parser(name, parents=[common], help=text, description=text)
               for name, (_, text) in COMMANDS.items()}

    p = parsers["scan-F"]
    p.add_argument("--g-min", type=float, default=1e-3)
    p.add_argument("--g-max", type=float, default=3.0)
    p.add_argument("--points", type=int, default=301)
    p.add_argument("--linear", action="store_true", help="linear instead of log spacing")

    p = parsers["simulate"]
    p.add_argument("--dt", type=float, help="time step (default 1e-4 for T <= 1, else 1e-3)")
    p.add_argument("--horizon", type=float, help="simulated horizon (stationary default 2)")
    p.add_argument("--x0", type=float, default=1.0)
    p.add_argument("--antithetic", action="store_true")
    p.add_argument("--traces", type=int, default=0, help="record up to 100 individual paths")
    p.set_defaults(paths=None)

    for name in ("mv-frontier", "mv-benchmark"):
        parsers[name].add_argument("--targets", help="comma-separated expected terminal wealth levels")
        parsers[name].add_argument("--dt", type=float, help="time step (default T/1200)")
    parsers["mv-benchmark"].add_argument("--traces", type=int, default=1, help="wealth paths to sample")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "simulate" and args.paths is None:
        args.paths = 10_000
    if args.command == "simulate" and args.seed is None:
        args.seed = 0
    if args.command == "scan-F" and args.linear and args.g_min < 0:
        parser.error("--g-min must be >= 0")

    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonLines())
    root = logging.getLogger("clq")
    root.handlers[:] = [handler]
    root.setLevel(logging.INFO)
    root.propagate = False

    func = COMMANDS[args.command][0]
    try:
        return func(args)
    except ClqError as exc:
        if args.debug:
            raise
        fields = {"type": type(exc).__name__, "message": getattr(exc, "message", str(exc))}
        for attr in ("assumption", "index", "line", "column"):
            val = getattr(exc, attr, None)
            if val not in (None, ""):
                fields[attr] = val
        _diag("error", **fields)
    except (OSError, ValueError) as exc:
        if args.debug:
            raise
        _diag("error", type=type(exc).__name__, message=str(exc))
    return EXIT_ERROR


def load_result(path):
    """Rebuild the solution object stored in a result.json file."""
    obj = json.loads(Path(path).read_text())
    cmd = obj.get("command")
    if cmd == "solve-finite":
        return RiccatiSolution.from_dict(obj["solution"])
    if cmd in ("solve-stationary", "scan-F") and obj.get("status") == "ok":
        return StationarySolution.from_dict(obj["solution"])
    return obj


if __name__ == "__main__":
    sys.exit(main())
