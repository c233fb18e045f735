"""Command line entry point.

    svvc run --scenario FILE [--case 1|2|3] [--out DIR] [--seed N]
    svvc validate --feeder FILE
    svvc sweep --all-cases [--out DIR]

Exit status: 0 success, 1 bad input, 2 optimizer infeasible in some
interval, 3 power-flow failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

EXIT_OK, EXIT_INPUT, EXIT_INFEASIBLE, EXIT_SOLVER = 0, 1, 2, 3

log = logging.getLogger("svvc")


class _Parser(argparse.ArgumentParser):
    # argparse would exit with 2, which is reserved for infeasibility here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="svvc", description="Coordinated volt/var control simulator")
    p.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="simulate one scenario")
    r.add_argument("--scenario", required=True, type=Path)
    r.add_argument("--case", type=int, choices=(1, 2, 3))
    r.add_argument("--out", type=Path, default=Path("out"))
    r.add_argument("--seed", type=int)
    r.add_argument("--no-figures", action="store_true", help="write CSVs only")

    v = sub.add_parser("validate", help="load and check a feeder file")
    v.add_argument("--feeder", required=True, type=Path)
    v.add_argument("--raw", action="store_true", help="skip the bundled-feeder modifications")

    s = sub.add_parser("sweep", help="run every bundled scenario")
    s.add_argument("--all-cases", action="store_true", help="run cases 1, 2 and 3 for each scenario")
    s.add_argument("--out", type=Path, default=Path("out"))
    s.add_argument("--scenario", type=Path, action="append", help="restrict to these scenario files")
    s.add_argument("--seed", type=int)
    s.add_argument("--no-figures", action="store_true")
    return p


def _run_one(scenario, out_dir: Path, figures: bool):
    from svvc.feeder import load_feeder
    from svvc.sim import run_case
    from svvc.sim.report import emit_report

    model = load_feeder(scenario.feeder)
    t0 = time.perf_counter()
    rep = run_case(scenario, model)
    log.info("%s case %d done in %.1f s", scenario.name, scenario.case, time.perf_counter() - t0)
    emit_report(rep, out_dir, model, figures=figures)
    return rep


def _status(reports) -> int:
    return EXIT_INFEASIBLE if any(r.case == 3 and r.infeasible_intervals for r in reports) else EXIT_OK


def cmd_run(args) -> int:
    from svvc.sim import load_scenario

    scenario = load_scenario(args.scenario)
    if args.case is not None:
        scenario = scenario.with_case(args.case)
    if args.seed is not None:
        scenario = scenario.with_seed(args.seed)
    rep = _run_one(scenario, args.out, not args.no_figures)
    print(",".join(str(x) for x in rep.row()))
    return _status([rep])


def cmd_validate(args) -> int:
    from svvc.feeder import load_feeder
    from svvc.powerflow import InjectionSet, solve

    model = load_feeder(args.feeder, apply_modifications=not args.raw)
    sol = solve(model, InjectionSet.build(model, 1.0, 0.0))
    print(f"{args.feeder}: {len(model.buses)} buses, {len(model.branches)} branches, "
          f"{model.n_nodes} phase nodes, {len(model.regulators)} regulators, "
          f"{len(model.smart_slots)} smart inverter phases")
    print(f"base-case power flow: {sol.iterations} sweeps, mismatch {sol.mismatch:.2e} pu, "
          f"v in [{sol.v.min():.4f}, {sol.v.max():.4f}]")
    return EXIT_OK


def cmd_sweep(args) -> int:
    from svvc.sim import bundled_scenarios, load_scenario
    from svvc.sim.report import summarize

    files = args.scenario or bundled_scenarios()
    reports = []
    for path in files:
        base = load_scenario(path)
        if args.seed is not None:
            base = base.with_seed(args.seed)
        cases = (1, 2, 3) if args.all_cases else (base.case,)
        for case in cases:
            reports.append(_run_one(base.with_case(case), args.out / base.name, not args.no_figures))
    text = summarize(reports)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "sweep_metrics.csv").write_text(text + "\n", encoding="utf-8")
    print(text)
    return _status(reports)


def main(argv=None) -> int:
    from svvc.feeder import FeederError, ProfileError
    from svvc.powerflow import PowerFlowError
    from svvc.sim import ScenarioError, SimulationError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    handler = {"run": cmd_run, "validate": cmd_validate, "sweep": cmd_sweep}[args.command]
    try:
        return handler(args)
    except (SimulationError, PowerFlowError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (FeederError, ProfileError, ScenarioError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
