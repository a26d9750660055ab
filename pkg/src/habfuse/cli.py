"""Command-line front end: ``habfuse <command> --config <path>``.

Exit codes: 0 success, 1 validation error, 2 missing input. The environment
variable ``HABFUSE_THREADS`` caps kernel parallelism (see habfuse.backend).
"""

from __future__ import annotations

import argparse
import sys

from .errors import ConfigError, HabfuseError, MissingInputError
from .pipeline import COMMANDS, run


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="habfuse",
        description="Multi-sensor HAB concentration mapping pipeline",
    )
    parser.add_argument("command", choices=sorted(COMMANDS), help="pipeline stage to run")
    parser.add_argument("--config", required=True, help="path to the JSON pipeline config")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--stream", default=None, help="restrict the stage to one stream id")
    parser.add_argument("--species", default=None, help="restrict the stage to one species")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        manifest = run(args.command, args.config, seed=args.seed,
                       stream=args.stream, species=args.species)
    except MissingInputError as exc:
        print(f"habfuse {args.command}: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, HabfuseError, ValueError) as exc:
        print(f"habfuse {args.command}: {exc}", file=sys.stderr)
        return 1
    print(f"habfuse {args.command}: wrote {len(manifest['outputs'])} artifacts")
    return 0


if __name__ == "__main__":
    sys.exit(main())
