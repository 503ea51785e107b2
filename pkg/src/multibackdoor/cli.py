"""Command line entry point: ``multibackdoor {run,matrix,probe,inspect}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import Optional, Sequence

from .errors import MultiBackdoorError
from .experiments import PRESETS, load_config, run_experiment, run_inspect, run_matrix, run_probe, validate_config

VERBS = {"run": run_experiment, "matrix": run_matrix, "probe": run_probe, "inspect": run_inspect}


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="multibackdoor", description=__doc__)
    ap.add_argument("verb", choices=sorted(VERBS))
    src = ap.add_mutually_exclusive_group(required=True)
    src.add_argument("--config", help="JSON experiment config")
    src.add_argument("--preset", choices=sorted(PRESETS), help="built-in desk-scale experiment")
    ap.add_argument("--out", required=True, help="output directory")
    ap.add_argument("--seed", type=int, help="override the config seed")
    ap.add_argument("--threads", type=int, default=1, help="cells played in parallel")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.config:
            cfg = load_config(args.config)
        else:
            cfg = validate_config(PRESETS[args.preset])
        if args.seed is not None:
            cfg.raw["seed"] = args.seed
        if args.threads < 1:
            raise MultiBackdoorError("--threads must be >= 1", stage="config")
        out = VERBS[args.verb](cfg, args.out, threads=args.threads)
    except MultiBackdoorError as exc:
        if exc.stage is None:
            exc.stage = "config"
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: [io] {exc}", file=sys.stderr)
        return 3
    if args.verb == "matrix":
        print(json.dumps(out["report"], indent=1))
    print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
