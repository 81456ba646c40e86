"""Command-line entry point.

One subcommand per experiment; each takes a JSON config whose ``experiment``
field must match the subcommand. Outputs land in ``--out`` (default
``./out/<command>``): ``manifest.json``, ``report.json`` and the
experiment's data files. Exit codes: 0 success, 2 config error, 3 numerical
failure, 4 configured checks failed.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from .experiments import EXPERIMENTS, run_experiment


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="opidyn",
        description="Simulation and analysis of self-exciting opinion dynamics.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    help_lines = {
        "simulate": "run one particle system and record its trajectory",
        "pde": "evolve the mean-field density family and record snapshots",
        "steady": "evaluate closed-form long-time laws on a grid",
        "converge": "particle laws against the mean-field density across population sizes",
        "coupling": "pathwise error between the jump system and its compensated twin",
        "figures": "clustering evolution, relaxation and final profiles in one run",
        "slant-mean": "mean growth under the neighbor-value kernel, three ways",
    }
    for name in EXPERIMENTS:
        p = sub.add_parser(name, help=help_lines[name])
        p.add_argument("--config", required=True, help="path to the JSON config file")
        p.add_argument("--out", default=None, help="output directory (default ./out/<command>)")
        p.add_argument("--seed", type=int, default=None, help="override the config's seed")
        p.add_argument(
            "--threads",
            type=int,
            default=None,
            help="worker processes for independent jobs "
            "(default $OPIDYN_THREADS or 1; never changes results)",
        )
        p.add_argument("-v", "--verbose", action="count", default=0,
                       help="-v for progress, -vv for debug")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    out = args.out if args.out is not None else os.path.join("out", args.command)
    return run_experiment(
        args.config,
        out,
        seed_override=args.seed,
        threads=args.threads,
        expect_command=args.command,
    )


if __name__ == "__main__":
    sys.exit(main())
