"""Command-line entry point: ``kropelab <subcommand> --config cfg.json --out dir``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from kropelab.errors import KropeLabError
from kropelab.experiments import ExperimentConfig, write_outputs

SUBCOMMANDS = {
    "garnet-sweep": "garnet_sweep",
    "counterexample": "counterexample",
    "ope-trace": "ope_trace",
    "diagnose": "diagnose",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kropelab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="JSON experiment config")
        p.add_argument("--out", type=Path, default=Path("results"), help="output directory")
        p.add_argument("--trials", type=int, help="override the number of trials")
        p.add_argument("--seed", type=int, help="override the base seed")
        p.add_argument("--jobs", type=int, help="worker processes")
        if name == "diagnose":
            p.add_argument("--encoder", type=Path, help="encoder weight matrix CSV")
            p.add_argument("--mdp", type=Path, help="MDP JSON")
            p.add_argument("--dataset", type=Path, help="dataset JSON (exact expectations if omitted)")
    return parser


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    data = json.loads(args.config.read_text()) if args.config else {}
    data["kind"] = SUBCOMMANDS[args.command]
    for key in ("trials", "seed", "jobs"):
        if getattr(args, key) is not None:
            data[key] = getattr(args, key)
    if args.command == "diagnose":
        for key, attr in (("encoder_path", "encoder"), ("mdp_path", "mdp"), ("dataset_path", "dataset")):
            if getattr(args, attr) is not None:
                data[key] = str(getattr(args, attr))
    return ExperimentConfig.from_dict(data)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args)
        paths = write_outputs(config, args.out)
    except (KropeLabError, ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"kropelab: error: {exc}", file=sys.stderr)
        return 2
    for path in paths:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
