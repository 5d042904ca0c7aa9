"""Command-line entry point.

Every subcommand reads a JSON experiment plan (``--config``), writes a
bundle with a ``manifest.json`` into ``--out`` and accepts ``--seed`` to
override the scenario seed.  Exit status is 0 on success, 2 when a stage
failed or markets did not converge (see the manifest) and 1 on invalid
input.
"""

from __future__ import annotations

import argparse
import sys

from . import harness
from .errors import InvalidInput

COMMANDS = {
    "generate": "simulate markets and split them into training and test samples",
    "fit-toolkit": "fit the conduct-model toolkit estimators",
    "fit-vmm": "fit the flexible supply estimators",
    "simulate-merger": "predict post-merger prices and write the merger and fit tables",
    "passthrough": "pass-through matrices at the median merger-affected market",
    "infer": "standard errors and simultaneous intervals at selected observations",
    "report": "run every stage and write all tables",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flexmerge", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in COMMANDS.items():
        p = sub.add_parser(name, help=text, description=text)
        p.add_argument("--config", required=True, help="experiment plan (JSON)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the scenario seed")
        if name != "generate":
            p.add_argument("--data", default=None, help="dataset directory to use instead of generating")
        if name not in ("generate", "fit-toolkit", "fit-vmm"):
            p.add_argument("--fits", default=None, help="bundle directory holding earlier fits")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        # usage errors are invalid input; 2 is reserved for partial failure
        return 0 if e.code in (0, None) else 1
    try:
        if args.seed is not None and args.seed < 0:
            raise InvalidInput("--seed must be non-negative")
        plan = harness.load_plan(args.config, args.seed)
        res = harness.run_pipeline(
            plan, args.out, harness.COMMAND_STAGES[args.command],
            data_dir=getattr(args, "data", None), fits_dir=getattr(args, "fits", None),
        )
    except InvalidInput as e:
        print(f"flexmerge: invalid input: {e}", file=sys.stderr)
        return 1
    for f in res.failures:
        print(f"flexmerge: stage {f['stage']} failed: {f['error']}: {f['message']}", file=sys.stderr)
    bad = {k: v for k, v in res.nonconverged.items() if v}
    for label, markets in bad.items():
        print(f"flexmerge: {label}: {len(markets)} market(s) did not converge", file=sys.stderr)
    print(f"{args.command}: {res.status} -> {args.out}")
    return res.exit_code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
