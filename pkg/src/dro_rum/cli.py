"""``dro-rum`` command line.

Exit codes: 0 success, 2 configuration or input error, 3 solver
non-convergence, 4 I/O error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import experiments as ex
from .dro import AcceptanceError, ConvergenceError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CONVERGENCE = 3
EXIT_IO = 4

COMMANDS = ("surplus", "table2", "table3", "substitution", "invert", "density")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dro-rum", description="Robust random utility experiments.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name in COMMANDS:
        p = sub.add_parser(name, help=f"run the {name} experiment")
        p.add_argument("--config", type=Path, help="TOML experiment file (built-in defaults if omitted)")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--paper-scale", action="store_true", help="full-scale run with 10^7 probability and 5*10^7 optimization draws")
        p.add_argument("--out", type=Path, help="output directory (overrides the config)")
        if name == "invert":
            p.add_argument("--probs", type=Path, help="CSV with header p0,...,pJ")
            p.add_argument("--rho", type=float, help="robustness radius for the inversion")
        if name == "density":
            p.add_argument("--rho", type=float)
            p.add_argument("--bins", type=int)
            p.add_argument("--coordinate", type=int, help="shock coordinate to histogram")
    return parser


def run(args: argparse.Namespace) -> Path:
    config = ex.load_config(args.config) if args.config else ex.ExperimentConfig()
    config = config.with_overrides(seed=args.seed, paper_scale=args.paper_scale, output_dir=args.out)
    cmd = args.command
    if cmd == "surplus":
        table = ex.cmd_surplus(config)
    elif cmd in ("table2", "table3"):
        table = ex.cmd_table(config, cmd)
    elif cmd == "substitution":
        table = ex.cmd_substitution(config)
    elif cmd == "invert":
        if args.rho is not None:
            config = config.with_overrides(invert_rho=args.rho)
        table = ex.cmd_invert(config, args.probs)
    else:
        table = ex.cmd_density(config, args.rho, args.bins, args.coordinate)
    return table.write(config.output_dir)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        path = run(args)
    except (ConvergenceError, AcceptanceError) as exc:
        print(f"dro-rum: solver failure: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except ValueError as exc:
        print(f"dro-rum: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        where = f" ({exc.filename})" if getattr(exc, "filename", None) else ""
        print(f"dro-rum: I/O error{where}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_IO
    print(path)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
