"""Experiment command line.

Subcommands: ``run``, ``resume``, ``eval``, ``report``, ``inject-noise``,
``validate``.  Exit codes: 0 success, 2 configuration error, 3 data
error, 4 training divergence.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import apply_overrides, load_config, validate_config
from .errors import ConfigError, DataFormatError, OracleUnavailableError, TrainingDivergedError
from .evaluation import evaluate
from .models import load_checkpoint
from .noise import save_noise_file
from .pipeline import build_datasets, default_runs_dir, resume, run_pipeline
from .report import write_report
from .seeding import SeedStreams

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("config", help="YAML configuration file")
    p.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
        help="override a config value (dotted path), e.g. --set bootstrap.K=0.25",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="labelboot", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute the full pipeline")
    _add_config_args(p_run)
    p_run.add_argument("--runs-dir", default=None, help=f"artifact root (default: $LABELBOOT_RUNS_DIR or ./runs)")
    p_run.add_argument("--from-stage", default=None, help="skip stages before this one (artifacts must exist)")
    p_run.add_argument("--skip-pretrain", action="store_true", help="disable contrastive pretraining")
    p_run.add_argument("--pretrained", default=None, help="load a backbone checkpoint instead of pretraining")
    p_run.add_argument("--quota-convention", default=None, choices=["fraction", "literal"])

    p_resume = sub.add_parser("resume", help="continue a run from its manifest")
    p_resume.add_argument("run_dir")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on the configured test set")
    _add_config_args(p_eval)
    p_eval.add_argument("checkpoint")
    p_eval.add_argument("--label-mode", default="null", choices=["null", "noisy"])
    p_eval.add_argument("--tta", action="store_true")
    p_eval.add_argument("--n-augs", type=int, default=25)

    p_report = sub.add_parser("report", help="render accuracy tables and histograms")
    p_report.add_argument("run_dir")
    p_report.add_argument("--out", default=None)

    p_noise = sub.add_parser("inject-noise", help="write the configured noisy labels to CSV")
    _add_config_args(p_noise)
    p_noise.add_argument("--out", required=True, help="output noise CSV path")

    p_val = sub.add_parser("validate", help="check a config file; list all violations")
    _add_config_args(p_val)
    return parser


def _load_config(args) -> "RunConfig":
    config = load_config(args.config)
    if args.overrides:
        config = apply_overrides(config, args.overrides)
    return config


def _cmd_run(args) -> int:
    config = _load_config(args)
    if args.skip_pretrain:
        config.pretrain.enabled = False
    if args.pretrained:
        config.pretrain.pretrained_path = args.pretrained
    if args.quota_convention:
        config.bootstrap.quota_convention = args.quota_convention
    problems = validate_config(config)
    if problems:
        print("configuration errors:", file=sys.stderr)
        for p in problems:
            print(f"  - {p}", file=sys.stderr)
        return EXIT_CONFIG
    runs_dir = Path(args.runs_dir) if args.runs_dir else default_runs_dir()
    manifest = run_pipeline(config, runs_dir / config.run_id, from_stage=args.from_stage)
    print(json.dumps({name: s["status"] for name, s in manifest.stages.items()}, indent=2))
    return EXIT_OK


def _cmd_resume(args) -> int:
    manifest = resume(args.run_dir)
    print(json.dumps({name: s["status"] for name, s in manifest.stages.items()}, indent=2))
    return EXIT_OK


def _cmd_eval(args) -> int:
    config = _load_config(args)
    model, _ = load_checkpoint(args.checkpoint)
    _, test = build_datasets(config)
    if args.label_mode == "noisy":
        from .pipeline import noisy_test_set

        test = noisy_test_set(config, test)
    report = evaluate(
        model, test, label_mode=args.label_mode, tta=args.tta,
        n_augs=args.n_augs, streams=SeedStreams(config.seed),
    )
    print(json.dumps({"top1": report.top1, "top5": report.top5, "mode": report.mode,
                      "label_mode": report.label_mode}, indent=2))
    return EXIT_OK


def _cmd_report(args) -> int:
    for path in write_report(args.run_dir, args.out):
        print(path)
    return EXIT_OK


def _cmd_inject_noise(args) -> int:
    config = _load_config(args)
    train, _ = build_datasets(config)
    save_noise_file(train.noisy_labels, args.out)
    print(args.out)
    return EXIT_OK


def _cmd_validate(args) -> int:
    config = _load_config(args)
    problems = validate_config(config)
    if problems:
        for p in problems:
            print(f"- {p}")
        return EXIT_CONFIG
    print("ok")
    return EXIT_OK


_COMMANDS = {
    "run": _cmd_run,
    "resume": _cmd_resume,
    "eval": _cmd_eval,
    "report": _cmd_report,
    "inject-noise": _cmd_inject_noise,
    "validate": _cmd_validate,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataFormatError, OracleUnavailableError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDivergedError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
