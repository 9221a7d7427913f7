"""Train the counter with and without depth features on the same data.

A shortened version of the depth ablation: one seed and fewer epochs.
The full three-seed experiment is ``thermcount ablate --suite depth``.

Run: python3 demos/04_counting_with_depth.py --out demo_out --epochs 30
"""
import argparse
import logging
from pathlib import Path

from thermcount.config import ExperimentConfig, apply_overrides
from thermcount.pipeline import resolve_bank, synthetic_splits
from thermcount.report import format_table, plot_curves
from thermcount.training import run_pretraining, stack_scenes, train_counting


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", type=Path, default=Path("demo_out"))
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--pretrain-steps", type=int, default=1000)
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    base = apply_overrides(ExperimentConfig(), {"optim.epochs": str(args.epochs),
                                                "optim.eval_every": str(max(1, args.epochs // 6)),
                                                "extractor.pretrain_steps": str(args.pretrain_steps)})
    train_scenes, test_scenes = synthetic_splits(base)
    o = base.objective
    train, test = stack_scenes(train_scenes, o.density_sigma, o.n), stack_scenes(test_scenes, o.density_sigma, o.n)
    extractor, _ = run_pretraining(base, train_scenes)

    rows, curves = [], {}
    for label, mode in (("thermal-only", "none"), ("thermal+raw-depth", "raw"), ("thermal+extractor", "extractor")):
        cfg = apply_overrides(base, {"model.depth_mode": mode})
        r = train_counting(cfg, train, test, extractor if mode == "extractor" else None, resolve_bank(cfg))
        rows.append({"variant": label, **{k: r.final[k] for k in ("game0", "game1", "game2", "game3", "rmse")}})
        curves[label] = r.trainer.history.epoch_losses(r.trainer.steps_per_epoch)

    text = format_table(rows, ["variant", "game0", "game1", "game2", "game3", "rmse"],
                        f"final test metrics after {args.epochs} epochs")
    print(text)
    (args.out / "counting_with_depth.txt").write_text(text + "\n", encoding="utf-8")
    plot_curves(curves, args.out / "counting_loss.png", "epoch", "training loss", logy=True)


if __name__ == "__main__":
    main()
