"""Command line: ``thermcount generate|pretrain|train|evaluate|ablate|report``.

Exit codes: 0 success, 2 invalid configuration or input, 3 missing or
unreadable artifact, 4 numeric failure (non-finite loss or prediction),
1 anything else (for example an unwritable output path).
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import torch

from .config import ExperimentConfig, apply_overrides, load_config, paper_scale_config
from .errors import InvalidConfiguration, InvalidInput, InvalidParameter, MissingArtifact, NumericFailure, ParseError

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_ARTIFACT, EXIT_NUMERIC = 0, 1, 2, 3, 4

log = logging.getLogger("thermcount")


def _override(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), v.strip()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="thermcount", description="Thermal crowd counting with depth-derived features.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat 'section.key = value' config file")
    common.add_argument("--out", type=Path, help="output directory (default: run.out from the config)")
    common.add_argument("--seed", type=int, help="scene seed for generate, optimizer seed otherwise")
    common.add_argument("--override", type=_override, action="append", default=[], metavar="KEY=VALUE",
                        help="replace one config entry; repeatable")
    common.add_argument("--paper-scale", action="store_true", help="start from the full-scale hyperparameters")
    common.add_argument("--threads", type=int, default=1,
                        help="torch intra-op threads; results are bit-identical only at a fixed count (default 1)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write a synthetic dataset (to --out or data.root)")
    sub.add_parser("pretrain", parents=[common], help="pretrain the depth-conditioned denoiser")
    p = sub.add_parser("train", parents=[common], help="train the counting model")
    p.add_argument("--resume", action="store_true", help="continue from OUT/last.ckpt")
    p = sub.add_parser("evaluate", parents=[common], help="score a counting checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--split", default="test", choices=["train", "test"])
    p = sub.add_parser("ablate", parents=[common], help="run an ablation suite over shared seeds")
    p.add_argument("--suite", required=True)
    p.add_argument("--seeds", type=int, default=3, help="number of seeds, counting up from the base seed")
    p = sub.add_parser("report", parents=[common], help="merge run reports into comparison tables")
    p.add_argument("runs", nargs="+", type=Path)
    return parser


def resolve_config(args) -> ExperimentConfig:
    base = paper_scale_config() if args.paper_scale else ExperimentConfig()
    cfg = load_config(args.config, base) if args.config else base.validate()
    items = dict(args.override)
    if args.seed is not None:
        items["scene.seed" if args.command == "generate" else "optim.seed"] = str(args.seed)
    if args.out is not None and args.command != "generate":
        items["run.out"] = str(args.out)
    return apply_overrides(cfg, items) if items else cfg


def run(args) -> int:
    from . import ablation, pipeline, report

    if args.threads < 1:
        raise InvalidParameter(f"--threads must be >= 1, got {args.threads}")
    torch.set_num_threads(args.threads)
    cfg = resolve_config(args)
    out = Path(args.out) if args.out is not None else Path(cfg.run.out)
    if args.command == "generate":
        m = pipeline.cmd_generate(cfg, args.out)
        print(f"{len(m.entries)} scenes ({len(m.split('train'))} train, {len(m.split('test'))} test) "
              f"in {m.root}, manifest sha256 {m.digest()[:16]}")
    elif args.command == "pretrain":
        path = pipeline.cmd_pretrain(cfg, out)
        print(f"extractor checkpoint: {path}")
    elif args.command == "train":
        r = pipeline.cmd_train(cfg, out, resume=args.resume)
        print((out / "report.txt").read_text(encoding="utf-8"), end="")
        print(f"run {r.run_id} written to {out}")
    elif args.command == "evaluate":
        r = pipeline.cmd_evaluate(args.checkpoint, cfg, out, args.split)
        m = r.splits[args.split]
        print(" ".join(f"{k}={m[k]:.4f}" for k in report.METRIC_KEYS))
    elif args.command == "ablate":
        seeds = [cfg.optim.seed + i for i in range(args.seeds)]
        ablation.run_suite(args.suite, cfg, out, seeds)
        print((out / "table.txt").read_text(encoding="utf-8"), end="")
    elif args.command == "report":
        rows = report.aggregate_reports(args.runs, out)
        print(f"{len(rows)} rows written to {out / 'comparison.txt'}")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return run(args)
    except (InvalidConfiguration, InvalidParameter, InvalidInput) as exc:
        print(f"thermcount: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingArtifact, ParseError) as exc:
        print(f"thermcount: missing or unreadable artifact: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except NumericFailure as exc:
        print(f"thermcount: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"thermcount: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
