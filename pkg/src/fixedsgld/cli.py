"""``fixedsgld`` command line: one subcommand per experiment.

Each subcommand writes a CSV of grid rows to ``--out`` (stdout if omitted)
and a JSON summary next to it (``run.csv`` -> ``run.json``; stderr when the
CSV goes to stdout).

Exit codes: 0 success, 2 configuration error, 3 infeasible grid or every
replicate diverged.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .estimators import ReplicateError
from .experiments import logistic as logistic_exp
from .experiments import toy, weak_order
from .experiments.common import InfeasibleError, rows_to_csv, summary_path, to_json, write_text
from .experiments.config import ConfigError, dump_defaults, experiment_names, load_config
from .samplers import DivergenceError

log = logging.getLogger("fixedsgld")

RUNNERS = {
    "bias-sweep": toy.bias_sweep,
    "mse-sweep": toy.mse_sweep,
    "cost-minimize": toy.cost_minimize,
    "grow-n": toy.grow_n,
    "logistic": logistic_exp.logistic,
    "weak-order": weak_order.weak_order,
}

HELP = {
    "bias-sweep": "asymptotic bias of theta^2 against step size, analytic and long-chain",
    "mse-sweep": "exact MSE of the theta^2 average against steps and data passes",
    "cost-minimize": "minimal M*n subject to MSE <= eps^2 over step size, n and M",
    "grow-n": "dataset-averaged MSE and ERE trends as N grows",
    "logistic": "logistic regression MSE of the posterior mean against an RWM reference",
    "weak-order": "first-order bias coefficient of Euler on an OU target",
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fixedsgld", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name in experiment_names():
        sp = sub.add_parser(name, help=HELP[name], description=HELP[name])
        sp.add_argument("--config", metavar="PATH", help="TOML file overriding the defaults")
        sp.add_argument("--seed", type=int, metavar="U64", help="master seed")
        sp.add_argument("--out", metavar="PATH", help="CSV output path (default stdout)")
        sp.add_argument("--replicates", type=int, metavar="R", help="replicate count")
        sp.add_argument("--threads", type=int, metavar="T", help="worker processes")
        sp.add_argument("--print-defaults", action="store_true", help="print the default config and exit")
    return p


def run(name: str, cfg: dict, out=None) -> dict:
    rows, columns, summary = RUNNERS[name](cfg)
    write_text(out, rows_to_csv(rows, columns))
    js = to_json(summary)
    target = summary_path(out)
    if target is None:
        sys.stderr.write(js)
    else:
        write_text(target, js)
    return summary


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    name = args.command
    if args.print_defaults:
        sys.stdout.write(dump_defaults(name))
        return 0
    try:
        cfg = load_config(name, args.config, {"seed": args.seed, "replicates": args.replicates,
                                              "threads": args.threads})
    except ConfigError as exc:
        print(f"fixedsgld {name}: config error: {exc}", file=sys.stderr)
        return 2
    log.info("running %s with seed %d", name, cfg["seed"])
    try:
        run(name, cfg, args.out)
    except (InfeasibleError, ReplicateError, DivergenceError) as exc:
        print(f"fixedsgld {name}: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"fixedsgld {name}: cannot write output: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
