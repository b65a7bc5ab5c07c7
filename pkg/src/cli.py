import argparse
import logging
import sys

from src import __version__
from src.config import load_config
from src.errors import ConfigError, GranularError
from src.experiments import COMMANDS, Workspace

logger = logging.getLogger(__name__)

EXIT_PASSED = 0
EXIT_FAILED = 1
EXIT_ERROR = 2


def build_parser():
    """
    Argument parser with one subcommand per experiment.

    Returns:
        argparse.ArgumentParser: Parser for granular-hydro.
    """
    parser = argparse.ArgumentParser(
        prog="granular-hydro",
        description="Granular gas experiments: cooling states, spectra, transport, Haff's law and the fluid limit.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subparsers = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name in COMMANDS:
        sub = subparsers.add_parser(name, help=f"run the {name} experiment")
        sub.add_argument("--config", default=None, help="YAML config; defaults apply when omitted")
        sub.add_argument("--threads", type=int, default=None, help="cap on worker threads")
        sub.add_argument("--out", default=None, help="output directory (overrides run.out)")
        sub.add_argument("--verbose", "-v", action="store_true", help="debug logging")
    return parser


def setup_logging(verbose=False):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)-7s %(name)s: %(message)s",
        datefmt="%H:%M:%S",
    )


def run(argv=None):
    """
    Parses arguments, runs one subcommand and maps the outcome to an exit code.

    Returns:
        int: 0 when every check passed, 1 when a check failed, 2 on a config or runtime error.
    """
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose)
    logger.info("---[granular-hydro %s] %s ---", __version__, args.command)
    try:
        cfg = load_config(args.config)
        cfg = cfg.with_overrides(run={"threads": args.threads, "out": args.out})
        outcome = COMMANDS[args.command](cfg, Workspace(cfg))
    except ConfigError as exc:
        logger.error("Config error: %s", exc)
        return EXIT_ERROR
    except GranularError as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return EXIT_ERROR
    except OSError as exc:
        logger.error("I/O error: %s", exc)
        return EXIT_ERROR

    if outcome.passed:
        logger.info("---[granular-hydro] %s: all %d checks passed ---", args.command, len(outcome.checks))
        return EXIT_PASSED
    logger.error("---[granular-hydro] %s: failed checks: %s ---", args.command, ", ".join(outcome.failures))
    return EXIT_FAILED


def main():
    sys.exit(run())
