"""Command-line interface: ``reactive-control run | gen-exp | summarize``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .controller import ControlError
from .model import load_yaml
from .sim import (
    EXPERIMENTS,
    ScenarioError,
    bundled_scenario_path,
    exp_scenario,
    load_scenario,
    read_metrics,
    run_scenario,
    save_scenario,
    summarize,
    summary_text,
)

log = logging.getLogger("reactive_control")

EXIT_OK = 0
EXIT_HARD_ERROR = 1
EXIT_BAD_INPUT = 2


def _scenario_path(arg: str) -> Path:
    """Accept a file path, or the name of a bundled experiment such as ``exp-2`` or ``5-1``."""
    p = Path(arg)
    if p.exists():
        return p
    name = arg[len("exp-"):] if arg.startswith("exp-") else arg
    if name in EXPERIMENTS:
        return bundled_scenario_path(name)
    raise ScenarioError(f"scenario {arg!r} is neither a file nor a bundled experiment")


def cmd_run(args: argparse.Namespace) -> int:
    path = _scenario_path(args.scenario)
    scenario = load_scenario(path)
    log.info("running %s from %s", scenario.name, path)
    try:
        result = run_scenario(scenario, model=args.model, config=args.config, ticks=args.ticks, dump_qp=args.dump_qp)
    except ControlError as exc:
        print(f"hard error: {exc}", file=sys.stderr)
        if exc.dump:
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            (out / "error_dump.txt").write_text(exc.dump)
            print(f"offending tick written to {out / 'error_dump.txt'}", file=sys.stderr)
        return EXIT_HARD_ERROR

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(result.csv_text())
    (out / "summary.yaml").write_text(summary_text(result.summary))
    if args.dump_qp:
        (out / "qp_dump.txt").write_text("\n".join(result.qp_dumps))
    sm = result.summary
    print(f"{scenario.name}: {sm['ticks']} ticks, solver success {sm['solver_success_fraction']:.3f}, "
          f"fallback {sm['fallback_ticks']}, frozen {sm['frozen_ticks']}, reached {sm['reached']}/{sm['targets']}")
    print(f"metrics and summary written to {out}")
    return EXIT_OK


def cmd_gen_exp(args: argparse.Namespace) -> int:
    names = EXPERIMENTS if args.experiment == "all" else (args.experiment,)
    if args.out == "-":
        for name in names:
            sys.stdout.write(save_scenario(exp_scenario(name)))
        return EXIT_OK
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name in names:
        target = out / f"exp-{name}.yaml"
        save_scenario(exp_scenario(name), target)
        print(target)
    return EXIT_OK


def cmd_summarize(args: argparse.Namespace) -> int:
    rows = read_metrics(Path(args.metrics))
    sys.stdout.write(summary_text(summarize(rows)))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="reactive-control", description="Reactive whole-body reaching controller.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress and fallbacks")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="replay a scenario in closed loop")
    run.add_argument("scenario", help="scenario file, or a bundled experiment name such as exp-2")
    run.add_argument("--model", help="robot model file (overrides the scenario)")
    run.add_argument("--config", help="controller config file (overrides the scenario)")
    run.add_argument("--out", default=".", help="output directory (default: current directory)")
    run.add_argument("--ticks", type=int, help="run exactly this many ticks")
    run.add_argument("--dump-qp", action="store_true", help="also write every QP instance")
    run.set_defaults(func=cmd_run)

    gen = sub.add_parser("gen-exp", help="write a bundled experiment scenario")
    gen.add_argument("experiment", choices=(*EXPERIMENTS, "all"))
    gen.add_argument("--out", default=".", help="output directory, or - for stdout")
    gen.set_defaults(func=cmd_gen_exp)

    summ = sub.add_parser("summarize", help="summarize a metrics CSV")
    summ.add_argument("metrics", help="metrics CSV written by run")
    summ.set_defaults(func=cmd_summarize)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ScenarioError, ControlError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT


if __name__ == "__main__":
    sys.exit(main())
