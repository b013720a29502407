"""Command-line front end: stage subcommands plus an all-in-one ``run``."""

from __future__ import annotations

import argparse
import sys

from .errors import ConfigError, TreatfxError
from .pipeline import Pipeline, RunConfig

_STAGE_COMMANDS = {
    "simulate": ["stage_data"],
    "split": ["stage_common_support", "stage_split"],
    "select-features": ["stage_select_features"],
    "tune": ["stage_tune"],
    "fit": ["stage_fit"],
    "effects": ["stage_effects"],
    "wald": ["stage_wald"],
    "cluster": ["stage_cluster"],
    "placebo": ["stage_placebo"],
    "allocate": ["stage_allocate"],
    "tree": ["stage_tree"],
    "report": ["stage_report"],
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="treatfx",
        description="Multi-treatment honest causal forest pipeline: effect "
                    "estimation, heterogeneity analysis and programme allocation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in list(_STAGE_COMMANDS) + ["run"]:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--threads", type=int, default=None, help="worker threads")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = RunConfig.from_file(args.config)
        if args.seed is not None:
            config.raw["seed"] = args.seed
            config = RunConfig(config.raw)
        if args.threads is not None:
            config.threads = args.threads
        pipe = Pipeline(config, args.out)
        if args.command == "run":
            manifest = pipe.run_all()
            print(f"run complete: {manifest['n_artifacts']} artifacts in {args.out}")
        else:
            for method in _STAGE_COMMANDS[args.command]:
                getattr(pipe, method)()
            pipe.write_manifest()
            print(f"{args.command} complete")
    except TreatfxError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
