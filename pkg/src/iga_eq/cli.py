"""Command line driver: ``iga-eq --geometry quarter-ring --p 2 --strategy adaptive``.

Exit codes: 0 success, 1 invalid arguments, 2 invariant failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .adaptivity import STRATEGIES, LoopConfig, run_loop, write_csv, write_plots
from .errors import ConfigurationError, IgaError, InvariantViolation, NumericalError

EXIT_OK, EXIT_USAGE, EXIT_INVARIANT = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="iga-eq", description="Equilibrated flux estimates for hierarchical IGA of the Poisson problem.")
    ap.add_argument("--geometry", choices=("quarter-ring", "square"), default="quarter-ring")
    ap.add_argument("--p", type=int, default=2, help="spline degree")
    ap.add_argument("--m", default="1", help="multiplicity of new knots: 1 or p")
    ap.add_argument("--ptilde-offset", type=int, choices=(1, 2), default=2, help="RT degree minus p")
    ap.add_argument("--strategy", choices=STRATEGIES, default="uniform")
    ap.add_argument("--theta", type=float, default=0.5, help="Dörfler parameter")
    ap.add_argument("--max-elements", type=int, default=5000)
    ap.add_argument("--max-steps", type=int, default=25)
    ap.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--seed", type=int, default=0, help="seed for randomised invariant probes")
    ap.add_argument("--no-timing", action="store_true", help="write wall_ms = 0 for reproducible files")
    ap.add_argument("--skip-checks", action="store_true", help=argparse.SUPPRESS)
    return ap


def _setup_logging() -> None:
    level = os.environ.get("IGA_EQ_LOG", "WARNING").upper()
    if level.isdigit():
        lvl = int(level)
    else:
        lvl = getattr(logging, level, None)
        if not isinstance(lvl, int):
            lvl = logging.WARNING
    logging.basicConfig(level=lvl, format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        m = args.p if args.m == "p" else int(args.m)
        cfg = LoopConfig(
            geometry=args.geometry, p=args.p, m=m, ptilde_offset=args.ptilde_offset,
            strategy=args.strategy, theta=args.theta, max_elements=args.max_elements,
            max_steps=args.max_steps, record_timing=not args.no_timing, threads=args.threads,
            seed=args.seed, check_invariants=not args.skip_checks,
        )
    except (ConfigurationError, ValueError) as exc:
        print(f"iga-eq: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        results = run_loop(cfg)
    except (InvariantViolation, NumericalError) as exc:
        print(f"iga-eq: invariant failure: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except IgaError as exc:
        print(f"iga-eq: error: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{cfg.stem}.csv"
    write_csv(path, results)
    write_plots(out, results)
    last = results[-1]
    eff2 = "n/a" if last.report.eff2 is None else f"{last.report.eff2:.4f}"
    print(f"{path}: {len(results)} steps, final N={last.n_elements}, error={last.report.error:.4e}, eff2={eff2}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
