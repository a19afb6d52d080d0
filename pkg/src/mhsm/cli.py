"""Command-line entry point: ``mhsm <stage> --config run.json [--out DIR]``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import load_config
from .errors import NumericError, ValidationError
from .mosaic import MODELS
from .pipeline import STAGE_ORDER, Context, run_all, run_stage

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC = 0, 2, 3


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mhsm", description="Zone-wise flood/landslide susceptibility workflow")
    sub = p.add_subparsers(dest="command", required=True)
    for name in STAGE_ORDER + ["run"]:
        help_text = "all stages in order" if name == "run" else f"run the {name} stage"
        s = sub.add_parser(name, help=help_text)
        s.add_argument("--config", required=True, help="run configuration (JSON)")
        s.add_argument("--out", default=None, help="output root (default: <config dir>/out)")
        s.add_argument("--models", default=",".join(MODELS), help="comma list drawn from ef,lf,moe")
        s.add_argument("--zones", default=None, help="comma list of zone ids (default: all)")
        s.add_argument("--force", action="store_true", help="ignore matching manifests")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        out = Path(args.out) if args.out else Path(args.config).parent / "out"
        models = tuple(_csv_list(args.models))
        unknown = [m for m in models if m not in MODELS]
        if unknown or not models:
            raise ValidationError(f"--models must be drawn from {list(MODELS)}, got {args.models!r}")
        zones = None
        if args.zones:
            try:
                zones = tuple(int(z) for z in _csv_list(args.zones))
            except ValueError:
                raise ValidationError(f"--zones must be integers, got {args.zones!r}") from None
        ctx = Context(cfg, out, models, zones, args.force)
        if args.command == "run":
            status = run_all(ctx)
        else:
            status = {args.command: run_stage(ctx, args.command)}
        for stage, st in status.items():
            print(f"{stage}: {st}")
        return EXIT_OK
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
