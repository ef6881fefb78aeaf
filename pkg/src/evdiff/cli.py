"""Command-line entry point.

Exit statuses: 0 success, 2 configuration/validation failure, 3 missing
upstream artifact, 4 checkpoint/config mismatch, 1 any other runtime error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import default_config, load_config, serialize_config
from .errors import (
    CheckpointMismatchError,
    EvdiffError,
    EventFormatError,
    MissingArtifactError,
    ValidationError,
)
from .metrics import MetricReport
from .pipeline import COMMANDS, replay, run

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_CHECKPOINT = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evdiff",
        description="Reconstruct intensity video from event streams with residual diffusion.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    for name in COMMANDS:
        p = sub.add_parser(name, help=f"run the {name} stage")
        p.add_argument("--config", type=Path, default=None, help="config file (defaults apply if omitted)")
        p.add_argument("--out", type=Path, required=True, help="artifact directory")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        if name in ("sample", "sweep-steps"):
            p.add_argument("--steps", type=int, default=None, help="override infer.steps")

    p = sub.add_parser("replay", help="re-run a command from its manifest")
    p.add_argument("manifest", type=Path)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("print-config", help="print the default configuration")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "print-config":
            sys.stdout.write(serialize_config(default_config()))
            return EXIT_OK
        if args.command == "replay":
            manifest = replay(args.manifest, args.out)
            print(f"replayed {manifest.command} into {args.out}")
            return EXIT_OK

        cfg = load_config(args.config) if args.config else default_config()
        if args.seed is not None:
            cfg = cfg.with_values({"seed": args.seed})
        if getattr(args, "steps", None) is not None:
            cfg = cfg.with_values({"infer.steps": args.steps})
        manifest = run(args.command, cfg, args.out)
        print(f"{args.command}: wrote {len(manifest.outputs)} artifact files to {args.out}")
        if args.command == "eval":
            print(MetricReport.load(Path(args.out) / "metrics.csv").table())
        return EXIT_OK
    except (ValidationError, EventFormatError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifactError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_MISSING
    except CheckpointMismatchError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except EvdiffError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
