"""Command-line front end over the staged pipeline."""

from __future__ import annotations

import argparse
import json
import sys

from .pipeline import STAGES, Pipeline, RunConfig
from .presets import PRESET_NAMES, preset_run_config


def _add_common(p):
    p.add_argument("--config", help="run configuration JSON path")
    p.add_argument("--preset", choices=PRESET_NAMES,
                   help="built-in configuration (alternative to --config)")
    p.add_argument("--outdir", required=True, help="artifact directory")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--precision", choices=("f32", "f64"),
                   help="override the config precision")


def _load_config(args) -> RunConfig:
    if args.config:
        config = RunConfig.load(args.config)
    elif args.preset:
        config = RunConfig.from_json_dict(
            preset_run_config(args.preset, seed=args.seed or 0))
    else:
        raise SystemExit("one of --config or --preset is required")
    if args.seed is not None:
        config.seed = args.seed
        config.search.seed = args.seed
        config.train.seed = args.seed
    if args.precision is not None:
        config.precision = args.precision
    return config


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="prunepool",
        description="Budgeted channel pruning: search once, train a pool of "
                    "sub-networks jointly, deploy per device.")
    sub = parser.add_subparsers(dest="command", required=True)

    for stage in STAGES:
        p = sub.add_parser(stage, help=f"run the {stage} stage")
        _add_common(p)
        if stage == "export":
            p.add_argument("--structure", help="export only this structure id")
            p.add_argument("--resolution", type=int,
                           help="calibrated resolution to embed")

    p_run = sub.add_parser("run", help="run all stages in order")
    _add_common(p_run)
    p_run.add_argument("--stage", action="append", choices=STAGES,
                       help="restrict to these stages (repeatable)")
    p_run.add_argument("--resume", action="store_true",
                       help="skip stages whose artifacts already exist")

    p_init = sub.add_parser("init", help="write a preset config JSON to stdout")
    p_init.add_argument("--preset", choices=PRESET_NAMES, default="paper-desk")
    p_init.add_argument("--seed", type=int, default=0)
    p_init.add_argument("--target-rate", type=float, default=0.5,
                        help="center rate for the single-network preset")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "init":
        json.dump(preset_run_config(args.preset, seed=args.seed,
                                    target_rate=args.target_rate),
                  sys.stdout, indent=1, sort_keys=True)
        sys.stdout.write("\n")
        return 0

    config = _load_config(args)
    pipe = Pipeline(config=config, outdir=args.outdir)
    if args.command == "run":
        stages = tuple(args.stage) if args.stage else STAGES
        ran = pipe.run(stages=stages, resume=args.resume)
        print(f"ran stages: {', '.join(ran) if ran else '(all up to date)'}")
        return 0
    if args.command == "export":
        paths = pipe.stage_export(structure_id=args.structure,
                                  resolution=args.resolution)
        for p in paths:
            print(p)
        return 0
    getattr(pipe, f"stage_{args.command}")()
    print(f"{args.command} stage complete; artifacts in {args.outdir}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
