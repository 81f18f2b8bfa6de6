"""``varcast`` command line: one subcommand per pipeline stage plus ``pipeline``.

Exit codes: 0 success, 2 config error, 3 missing input, 4 numeric failure,
5 wall-time exhaustion, 6 checksum mismatch.
"""
import argparse
import logging
import sys
from pathlib import Path

from . import __version__
from .config import ConfigError, load_config
from .pipeline import STAGES, StageError, pipeline, run_stage

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_NUMERIC = 4
EXIT_WALL_TIME = 5
EXIT_CHECKSUM = 6

log = logging.getLogger("varcast")


def _common(p):
    p.add_argument("-w", "--workdir", default="run", help="directory holding every stage's inputs and outputs")
    p.add_argument("-c", "--config", help="INI config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value (repeatable)")
    p.add_argument("--seed", type=int, help="master seed (same as --set pipeline.master_seed=N)")
    p.add_argument("--desk", action="store_true", help="start from the desk-scale preset")
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.add_argument("-q", "--quiet", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="varcast", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "simulate": "LHS screen, turnover filter and replicate simulator runs",
        "augment": "apply the observation model to training runs",
        "train": "fit the quantile transformer",
        "forecast": "write TC, VAC and persistence forecasts for evaluation runs",
        "score": "MAE / WIS / coverage table",
        "bootstrap": "block and iid bootstrap of the scores",
        "pipeline": "run every stage in order",
    }
    for name in STAGES + ("pipeline",):
        p = sub.add_parser(name, help=helps[name])
        _common(p)
        if name in ("score", "bootstrap"):
            p.add_argument("--forecasts", help="directory of forecast CSVs (one per model)")
            p.add_argument("--truth", help="truth CSV with location, week, value")
        if name == "pipeline":
            p.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = logging.WARNING if args.quiet else (logging.DEBUG if args.verbose > 1 else logging.INFO)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)

    if args.config and not Path(args.config).exists():
        print(f"error: missing input: config file {args.config}", file=sys.stderr)
        return EXIT_MISSING
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"pipeline.master_seed={args.seed}")
    try:
        cfg = load_config(args.config, overrides, desk=args.desk)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    workdir = Path(args.workdir)
    try:
        if args.command == "pipeline":
            if args.print_config:
                print(cfg.to_ini())
                return EXIT_OK
            pipeline(cfg, workdir)
        else:
            kw = {}
            if args.command in ("score", "bootstrap"):
                kw = {"forecasts_dir": args.forecasts, "truth_path": args.truth}
            run_stage(args.command, cfg, workdir, **kw)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
