"""Command-line interface for the experiment pipeline.

Exit codes: 0 success, 2 config error, 3 missing artifact, 4 numeric
divergence during training.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import experiment
from .errors import ConfigError, DivergenceError, MissingArtifactError

logger = logging.getLogger("amcens")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING_ARTIFACT = 3
EXIT_DIVERGENCE = 4

_STAGES = {
    "generate": experiment.generate,
    "train": experiment.train,
    "evaluate": experiment.evaluate,
    "attack": experiment.attack,
    "report": experiment.report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="amcens",
        description="Deep-ensemble UQ pipeline for modulation classification",
    )
    sub = parser.add_subparsers(dest="stage", required=True)
    for stage, fn in _STAGES.items():
        p = sub.add_parser(stage, help=fn.__doc__.splitlines()[0] if fn.__doc__ else None)
        p.add_argument("--config", required=True, help="experiment config YAML")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--workers", type=int, default=None, help="ensemble training workers")
        p.add_argument("--seed-override", type=int, default=None, help="replace the root seed")
        p.add_argument(
            "--precision", choices=("f32", "f64"), default=None, help="model precision"
        )
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = experiment.load_config(args.config)
        if args.seed_override is not None:
            cfg.seed = args.seed_override
            cfg.raw = dict(cfg.raw, seed=args.seed_override)
        if args.precision is not None:
            cfg.precision = args.precision
        if args.workers is not None:
            if args.workers < 1:
                raise ConfigError("--workers must be >= 1")
            cfg.workers = args.workers
        info = _STAGES[args.stage](cfg, args.out)
        logger.info("%s finished: %s", args.stage, info)
        return EXIT_OK
    except ConfigError as exc:
        logger.error("config error: %s", exc)
        return EXIT_CONFIG
    except MissingArtifactError as exc:
        logger.error("missing artifact: %s", exc)
        return EXIT_MISSING_ARTIFACT
    except DivergenceError as exc:
        logger.error("training diverged: %s", exc)
        return EXIT_DIVERGENCE


if __name__ == "__main__":
    sys.exit(main())
