"""Ablation suites: one axis of variation, several shared seeds, medians reported.

Every variant of a suite is trained once per seed on the same data with the
same seed, so paired differences reflect the varied setting alone. The numbers
reported are final-epoch test metrics. Best-by-test checkpoints exist for
inspection, but picking them would select on the test split itself.
"""
from __future__ import annotations

import logging
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, apply_overrides
from .errors import InvalidConfiguration
from .pipeline import dataset_or_synthetic, resolve_bank, resolve_extractor
from .report import METRIC_KEYS, format_table, plot_curves, write_csv
from .training import extractor_key, run_pretraining, stack_scenes, train_counting

log = logging.getLogger(__name__)

SUITES: dict[str, list[tuple[str, dict]]] = {
    "steps": [(f"n={n}", {"model.n_steps": str(n)}) for n in (1, 2, 3, 4)],
    "depth": [
        ("thermal-only", {"model.depth_mode": "none"}),
        ("thermal+raw-depth", {"model.depth_mode": "raw"}),
        ("thermal+extractor", {"model.depth_mode": "extractor"}),
    ],
    "loss": [
        ("reg only", {"objective.aux": "none"}),
        ("reg+CE", {"objective.aux": "ce"}),
        ("reg+PA", {"objective.aux": "pa"}),
    ],
    "prototypes": [(f"n={n}", {"objective.n": str(n)}) for n in (4, 5, 6, 7)],
    "latent": [
        ("fixed z_T", {"extractor.latent_mode": "fixed"}),
        ("resampled z_T", {"extractor.latent_mode": "resampled"}),
    ],
    # not one of the published tables: frozen extractor versus fine-tuning it with the counter
    "finetune": [
        ("frozen extractor", {"extractor.mode": "frozen"}),
        ("joint extractor", {"extractor.mode": "joint"}),
    ],
}


@dataclass
class VariantResult:
    label: str
    overrides: dict
    per_seed: list[dict] = field(default_factory=list)  # final test metrics + train_loss + seed + wall
    curves: list[list[float]] = field(default_factory=list)  # per-seed epoch-mean training loss

    def median(self, key: str) -> float:
        return statistics.median(r[key] for r in self.per_seed)

    def summary(self) -> dict:
        row = {"variant": self.label}
        row.update({k: self.median(k) for k in (*METRIC_KEYS, "train_loss", "wall")})
        return row


@dataclass
class AblationResult:
    suite: str
    seeds: list[int]
    variants: list[VariantResult]
    wall_clock: float = 0.0

    def table(self) -> list[dict]:
        return [v.summary() for v in self.variants]

    def by_label(self, label: str) -> VariantResult:
        return next(v for v in self.variants if v.label == label)


def _extractor_for_seed(cfg: ExperimentConfig, train_scenes, seed: int, cache_dir: Path | None) -> dict:
    """Pretrained extractor for one seed, reused from ``cache_dir`` when available."""
    if cfg.extractor.checkpoint:
        return resolve_extractor(cfg)
    e = cfg.extractor
    name = f"extractor-{extractor_key(cfg)}-s{seed}-{e.pretrain_steps}-{len(train_scenes)}.ckpt"
    if cache_dir is not None and (cache_dir / name).is_file():
        return load_checkpoint(cache_dir / name, kind="extractor")
    t0 = time.perf_counter()
    payload, _ = run_pretraining(cfg, train_scenes)
    log.info("pretrained extractor for seed %d in %.1fs", seed, time.perf_counter() - t0)
    if cache_dir is not None:
        save_checkpoint(cache_dir / name, payload)
    return payload


def run_suite(suite: str, base: ExperimentConfig, out=None, seeds=(0, 1, 2), data=None,
              cache_dir=None) -> AblationResult:
    """Train every variant of ``suite`` under each seed and write the comparison.

    Args:
        suite: one of :data:`SUITES`.
        base: configuration shared by all variants; ``optim.seed`` is replaced per seed.
        out: directory for tables, plots and cached extractors, or ``None`` to keep results in memory.
        data: optional ``(train_scenes, test_scenes)``; defaults to the configured dataset.
        cache_dir: where pretrained extractors are kept between suites (default ``out/extractors``).
    """
    if suite not in SUITES:
        raise InvalidConfiguration(f"unknown ablation suite {suite!r}; choose from {sorted(SUITES)}")
    t0 = time.perf_counter()
    out = Path(out) if out is not None else None
    cache = Path(cache_dir) if cache_dir is not None else (out / "extractors" if out is not None else None)
    if cache is not None:
        cache.mkdir(parents=True, exist_ok=True)
    train_scenes, test_scenes = data if data is not None else dataset_or_synthetic(base)
    variants = [VariantResult(label, ov) for label, ov in SUITES[suite]]
    stacked = {}
    for seed in seeds:
        seed_cfg = apply_overrides(base, {"optim.seed": str(seed)})
        needs_extractor = any(apply_overrides(seed_cfg, v.overrides).model.depth_mode == "extractor"
                              for v in variants)
        ext = _extractor_for_seed(seed_cfg, train_scenes, seed, cache) if needs_extractor else None
        for v in variants:
            cfg = apply_overrides(seed_cfg, v.overrides)
            o = cfg.objective
            key = (o.density_sigma, o.n)
            if key not in stacked:
                stacked[key] = (stack_scenes(train_scenes, *key), stack_scenes(test_scenes, *key))
            train, test = stacked[key]
            r = train_counting(cfg, train, test, ext if cfg.model.depth_mode == "extractor" else None,
                               resolve_bank(cfg))
            final = {k: r.final[k] for k in METRIC_KEYS}
            final.update(seed=seed, train_loss=r.final["train_loss"], wall=r.wall_clock)
            v.per_seed.append(final)
            v.curves.append(r.trainer.history.epoch_losses(r.trainer.steps_per_epoch))
            log.info("%s seed %d %s: GAME0 %.3f loss %.4f (%.0fs)", suite, seed, v.label,
                     final["game0"], final["train_loss"], r.wall_clock)
    result = AblationResult(suite, list(seeds), variants, time.perf_counter() - t0)
    if out is not None:
        write_ablation(result, out)
    return result


def write_ablation(result: AblationResult, out) -> None:
    """``table.txt`` / ``table.csv`` of medians, ``runs.csv`` per seed, and loss/metric plots."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    cols = ["variant", *METRIC_KEYS, "train_loss", "wall"]
    title = (f"ablation '{result.suite}': median of final-epoch test metrics over seeds "
             f"{result.seeds} ({result.wall_clock:.0f} s total)")
    (out / "table.txt").write_text(format_table(result.table(), cols, title), encoding="utf-8")
    write_csv(result.table(), cols, out / "table.csv")
    runs = [{"variant": v.label, **r} for v in result.variants for r in v.per_seed]
    write_csv(runs, ["variant", "seed", *METRIC_KEYS, "train_loss", "wall"], out / "runs.csv")
    curves = {}
    for v in result.variants:
        for seed, c in zip(result.seeds, v.curves):
            curves[f"{v.label} (seed {seed})"] = c
    plot_curves(curves, out / "loss_curves.png", "epoch", "training loss", logy=True)
    _bar(result, out / "game0.png")


def _bar(result: AblationResult, path) -> None:
    import matplotlib.pyplot as plt

    labels = [v.label for v in result.variants]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(labels, [v.median("game0") for v in result.variants], color="0.6")
    for i, v in enumerate(result.variants):
        ax.scatter([i] * len(v.per_seed), [r["game0"] for r in v.per_seed], color="k", s=12, zorder=3)
    ax.set_ylabel("test GAME(0), median and per seed")
    ax.set_title(f"ablation: {result.suite}")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)

