"""Command line entry point: ``trimeasure simulate|validate <spec.json>``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Sequence

from .errors import TrimeasureError
from .harness import ExperimentSpec, run_experiment


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trimeasure", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run an experiment and write CSV tables")
    sim.add_argument("spec", type=Path, help="experiment spec (JSON)")
    sim.add_argument("--quick", action="store_true", help="divide trajectory budgets by 20")
    sim.add_argument("--workers", type=int, default=1, help="worker processes (default 1)")
    sim.add_argument("--out", help="output path prefix (overrides the spec)")
    sim.add_argument("--seed", type=int, help="master seed (overrides the spec)")

    val = sub.add_parser("validate", help="check a spec without running it")
    val.add_argument("spec", type=Path)
    val.add_argument("--quick", action="store_true")
    return parser


def _load(path: Path) -> ExperimentSpec:
    try:
        text = path.read_text()
    except OSError as exc:
        raise TrimeasureError(f"cannot read {path}: {exc.strerror}") from exc
    return ExperimentSpec.from_json(text)


def _fail(exc: Exception) -> int:
    payload = {"status": "error", "error": type(exc).__name__, "message": str(exc)}
    print(json.dumps(payload), file=sys.stderr)
    return 2 if isinstance(exc, TrimeasureError) else 1


def main(argv: Sequence[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        spec = _load(args.spec)
        if args.quick:
            spec = spec.quick()
        if args.command == "validate":
            print(json.dumps({"status": "ok", "spec": spec.to_dict(), "fine_steps": spec.budget_steps()}, indent=2))
            return 0
        if args.seed is not None:
            spec = spec.with_seed(args.seed)
        if args.workers < 1:
            raise TrimeasureError("--workers must be ≥ 1")
        prefix = args.out or spec.output
        result, meta = run_experiment(spec, workers=args.workers)
        meta["quick"] = bool(args.quick)
        written = result.write(prefix, meta)
    except Exception as exc:  # noqa: BLE001 - every failure becomes an error document
        return _fail(exc)
    for line in result.diagnostics:
        print(line, file=sys.stderr)
    print(json.dumps({"status": "ok", "files": [str(p) for p in written]}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
