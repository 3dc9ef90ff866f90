"""Command line front end.

Exit codes: 0 success, 2 usage (unknown flag or subcommand), 3 runtime
refusal (invalid config, missing dataset or checkpoint, corrupt file).
Flags may appear before or after the subcommand; values given after win.
"""

from __future__ import annotations

import argparse
import sys

from .checkpoint import CheckpointCorruptError, CheckpointVersionError
from .config import ConfigError, RunConfig, load_config_file, validate_config
from . import pipeline

COMMANDS = {
    "gen-data": pipeline.stage_gen_data,
    "pretrain": pipeline.stage_pretrain,
    "align": pipeline.stage_align,
    "train": pipeline.stage_train,
    "sample": pipeline.stage_sample,
    "eval": pipeline.stage_eval,
    "report": pipeline.stage_report,
    "demo-contradict": pipeline.stage_demo_contradict,
    "run": pipeline.run_all,
}


def _add_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    # Subcommand-level copies default to SUPPRESS so they only override the
    # top-level values when actually given.
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", metavar="FILE", default=d,
                   help="config file (INI); defaults apply when omitted")
    p.add_argument("--seed", type=int, metavar="N", default=d,
                   help="run seed; every stage stream derives from it")
    p.add_argument("--out", metavar="DIR", default=d,
                   help="run directory (default runs/default)")
    p.add_argument("--conditions", metavar="LIST", default=d,
                   help="comma-separated condition modalities, e.g. audio,text")
    p.add_argument("--alpha", type=float, metavar="X", default=d,
                   help="control-branch scale")
    p.add_argument("--fusion", choices=("sum", "mean"), default=d,
                   help="control fusion mode")
    p.add_argument("--freeze-base", action="store_const", const=True, default=d,
                   help="train only the control branch")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="tridiff",
        description="compound-conditioned generation on a synthetic "
                    "image/audio/text corpus")
    _add_flags(p, suppress=False)
    sub = p.add_subparsers(dest="command", metavar="COMMAND")
    helps = {
        "gen-data": "render the dataset for this run",
        "pretrain": "masked-autoencoder pretraining per modality",
        "align": "build the shared condition space",
        "train": "train denoiser + control branch",
        "sample": "generate payloads from test-split conditions",
        "eval": "score the run; writes metrics.csv",
        "report": "render charts and a text summary",
        "demo-contradict": "sample under deliberately conflicting conditions",
        "run": "all stages through eval in order",
    }
    for name in COMMANDS:
        sp = sub.add_parser(name, help=helps[name])
        _add_flags(sp, suppress=True)
    return p


def effective_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config_file(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.conditions is not None:
        cfg.sample.conditions = args.conditions
    if args.alpha is not None:
        cfg.control.alpha = args.alpha
    if args.fusion is not None:
        cfg.control.fusion = args.fusion
    if args.freeze_base is not None:
        cfg.control.freeze_base = args.freeze_base
    validate_config(cfg)
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("tridiff: a subcommand is required", file=sys.stderr)
        return 2
    try:
        cfg = effective_config(args)
        out = args.out if args.out is not None else "runs/default"
        COMMANDS[args.command](cfg, out)
    except (ConfigError, pipeline.PipelineError, FileNotFoundError,
            CheckpointCorruptError, CheckpointVersionError) as exc:
        print(f"tridiff: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
