"""``capire`` command line: one subcommand per pipeline stage, plus ``all``."""

from __future__ import annotations

import argparse
import logging
import sys

from . import __version__
from .assembly import OutputExists
from .discovery import DegenerateInput
from .domain import IngestionError, ValidationFailed
from .forest import ModelError
from .pipeline import ALL_ORDER, STAGES, LeakageDetected, Run, run_all
from .vot import ConfigError

EXIT_OK, EXIT_FAILED, EXIT_CONFIG = 0, 1, 2

log = logging.getLogger("capire")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="capire", description="Trajectory-archetype pipeline.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")
    for name in ALL_ORDER + ("all",):
        p = sub.add_parser(name, help=_HELP[name])
        p.add_argument("--config", required=True, help="pipeline config (JSON)")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.add_argument("--seed", type=int, help="global seed (overrides the config)")
        p.add_argument("--force", action="store_true", help="overwrite existing artifacts")
        p.add_argument("--quiet", action="store_true", help="only report errors")
    return parser


_HELP = {
    "synth": "generate a synthetic cohort from a scenario",
    "validate": "check the input tables",
    "audit": "tag dictionary features by eligibility",
    "extract": "windowed feature extraction",
    "assemble": "imputation and scaling statistics",
    "cluster": "embedding, density clustering and profiles",
    "validate-clusters": "stability, significance, sensitivity and noise analysis",
    "train": "fit the archetype classifier",
    "evaluate": "held-out metrics and feature importance",
    "predict": "score students with the frozen model",
    "probe": "check that post-cutoff perturbations leave the matrix unchanged",
    "all": "every stage in order",
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.INFO, format="%(message)s",
                        stream=sys.stderr, force=True)
    try:
        run = Run.from_file(args.config, out_dir=args.out, seed=args.seed, force=args.force)
        if args.command == "all":
            run_all(run)
        else:
            man = STAGES[args.command](run)
            log.info("%s: done (config %s)", args.command, man["config_hash"][:12])
    except ValidationFailed as exc:
        log.error("validation failed: %s", exc)
        shown = [(rule, v) for rule, vs in exc.report.violations.items() for v in vs][:20]
        for rule, v in shown:
            log.error("  [%s] %s row %s: %s", rule, v["table"], v["row"], v["message"])
        return EXIT_FAILED
    except (IngestionError, LeakageDetected) as exc:
        log.error("%s", exc)
        return EXIT_FAILED
    except (ConfigError, OutputExists, ModelError, DegenerateInput) as exc:
        log.error("error: %s", exc)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
