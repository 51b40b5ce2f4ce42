"""Command-line entry point: ``statroute run`` and ``statroute compare``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields

from .report import (EXIT_INPUT, EXIT_OK, MODES, OUTPUT_ENV, IntegrityError, MismatchError, RunConfig,
                     compare_runs, run, write_comparison)

_HELP = {
    "mode": "pipeline to run",
    "scenario": "scenario YAML file",
    "seed": "master seed (required for mc and for --trials > 1)",
    "max_iters": "outer SCA iterations",
    "tol": "objective change that stops SCA",
    "beta": "ADMM dual step",
    "c": "ADMM penalty",
    "xi": "budget master step schedule",
    "online": "full mode: solve each SCA subproblem with ADMM",
    "output_dir": f"result directory (default ${OUTPUT_ENV} or ./statroute-out)",
    "trials": "number of perturbed shadowing realizations to average",
    "trial_shadow_db": "std (dB) of the static per-pair offsets drawn for each trial",
    "solution": "solution.json from an earlier run (deliver, mc)",
    "packets": "tagged packets per origin (mc)",
    "slots": "slots of the queue simulation (mc)",
    "admm_rounds": "maximum ADMM rounds",
    "gap_tol": "ADMM consensus gap that stops the rounds",
    "figures": "render PNG figures next to the CSV files",
}


def _add_run(sub):
    p = sub.add_parser("run", help="run one pipeline on a scenario")
    defaults = RunConfig(mode="sca-central", scenario="")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        default = getattr(defaults, f.name)
        if f.name == "mode":
            p.add_argument(flag, required=True, choices=MODES, help=_HELP[f.name])
        elif f.name == "scenario":
            p.add_argument(flag, required=True, help=_HELP[f.name])
        elif isinstance(default, bool):
            p.add_argument(flag, action=argparse.BooleanOptionalAction, default=default, help=_HELP[f.name])
        else:
            kind = {"seed": int}.get(f.name, type(default) if default is not None else str)
            p.add_argument(flag, type=kind, default=default, help=_HELP[f.name])
    return p


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="statroute", description=__doc__)
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)
    _add_run(sub)
    c = sub.add_parser("compare", help="per-metric deltas between two result directories")
    c.add_argument("a")
    c.add_argument("b")
    c.add_argument("--output", help="write the deltas as CSV here")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    if args.command == "compare":
        try:
            report = compare_runs(args.a, args.b)
        except (IntegrityError, MismatchError) as exc:
            print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
            return EXIT_INPUT
        if args.output:
            write_comparison(report, args.output)
        for line in report["flags"]:
            print(line)
        print("identical" if report["identical"] else f"{len(report['deltas'])} metrics compared")
        return EXIT_OK
    cfg = RunConfig(**{f.name: getattr(args, f.name) for f in fields(RunConfig)})
    outcome = run(cfg)
    if outcome.exit_code == EXIT_OK:
        print(f"{cfg.mode}: {outcome.summary.get('status')} -> {outcome.output_dir}")
    else:
        print(json.dumps(outcome.summary), file=sys.stderr)
    return outcome.exit_code


if __name__ == "__main__":
    sys.exit(main())
