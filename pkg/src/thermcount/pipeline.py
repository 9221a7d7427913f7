"""Run-level operations: dataset generation, pretraining, training, evaluation.

Each operation takes an :class:`ExperimentConfig` plus an output directory,
writes its artifacts there and returns the in-memory result. The command line
in :mod:`thermcount.cli` is a thin shell over these functions.

Output directory layout::

    config.txt          the fully resolved configuration
    extractor.ckpt      pretrained denoiser (pretrain)
    pretrain_losses.csv
    last.ckpt           latest counting checkpoint, written every evaluation
    best.ckpt           lowest test GAME(0) so far
    metrics.csv, report.txt, report.json, *.png
"""
from __future__ import annotations

import csv
import logging
import time
from pathlib import Path

import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, config_hash, parse_config, save_config
from .errors import InvalidConfiguration, InvalidInput, MissingArtifact
from .extractor import ConditionalDenoiser, build_schedule, extractor_payload, sample_fixed_latent
from .objectives import PrototypeBank
from .report import MetricsReport, plot_curves, write_report
from .scenes import Manifest, Scene, generate_dataset, generate_scene, load_manifest
from .training import Trainer, extractor_key, run_pretraining, stack_scenes

log = logging.getLogger(__name__)

CONFIG_FILE = "config.txt"
EXTRACTOR_FILE = "extractor.ckpt"
LAST_FILE = "last.ckpt"
BEST_FILE = "best.ckpt"


# --- data --------------------------------------------------------------------

def cmd_generate(cfg: ExperimentConfig, out=None) -> Manifest:
    """Write ``n_train + n_test`` scenes under ``out`` (default ``data.root``)."""
    root = Path(out or cfg.data.root)
    n = cfg.data.n_train + cfg.data.n_test
    if n == 0:
        raise InvalidInput("refusing to write an empty manifest: data.n_train + data.n_test is 0")
    manifest = generate_dataset(cfg.scene, n, root, n_test=cfg.data.n_test)
    counts = [e.count for e in manifest.entries]
    log.info("wrote %d scenes to %s (%d train / %d test, %d persons total)", len(counts), root,
             len(manifest.split("train")), len(manifest.split("test")), sum(counts))
    return manifest


def load_splits(cfg: ExperimentConfig, root=None) -> tuple[list[Scene], list[Scene]]:
    """Train and test scenes of the dataset on disk; the manifest's scene size must match the config."""
    manifest = load_manifest(root or cfg.data.root)
    if not manifest.entries:
        raise InvalidInput(f"dataset at {manifest.root} has an empty manifest")
    mc = manifest.config
    if (mc.H, mc.W) != (cfg.scene.H, cfg.scene.W):
        raise InvalidConfiguration(f"dataset scenes are {mc.H}x{mc.W} but the config expects "
                                   f"{cfg.scene.H}x{cfg.scene.W}")
    return manifest.load("train"), manifest.load("test")


def synthetic_splits(cfg: ExperimentConfig) -> tuple[list[Scene], list[Scene]]:
    """Generate the configured dataset in memory: the first ``n_train`` scenes train, the rest test."""
    n_train, n_test = cfg.data.n_train, cfg.data.n_test
    scenes = [generate_scene(cfg.scene, i) for i in range(n_train + n_test)]
    return scenes[:n_train], scenes[n_train:]


def dataset_or_synthetic(cfg: ExperimentConfig):
    """Use the dataset under ``data.root`` when it exists, otherwise generate it in memory."""
    if (Path(cfg.data.root) / "manifest.txt").is_file():
        return load_splits(cfg)
    return synthetic_splits(cfg)


# --- extractor ---------------------------------------------------------------

def cmd_pretrain(cfg: ExperimentConfig, out) -> Path:
    """Pretrain the depth-conditioned denoiser on the training split and save it."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / CONFIG_FILE)
    train, _ = load_splits(cfg)
    if not train:
        raise InvalidInput("the dataset has no training scenes")
    t0 = time.perf_counter()
    payload, losses = run_pretraining(cfg, train, log_every=200)
    log.info("pretrained %d steps in %.1fs, final loss %.6f", len(losses), time.perf_counter() - t0, losses[-1])
    path = save_checkpoint(out / EXTRACTOR_FILE, payload)
    with open(out / "pretrain_losses.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss"])
        w.writerows(enumerate(losses))
    plot_curves({"pseudo-Huber loss": losses}, out / "pretrain_loss.png", "pretraining step", "loss", logy=True)
    return path


def resolve_extractor(cfg: ExperimentConfig) -> dict | None:
    """Extractor payload for a counting run, checked against the run's config.

    Joint training may start from an untrained denoiser when no checkpoint is
    named; frozen use requires one.
    """
    if cfg.model.depth_mode != "extractor":
        return None
    e = cfg.extractor
    if not e.checkpoint:
        if e.mode != "joint":
            raise MissingArtifact("depth_mode=extractor needs extractor.checkpoint (run `pretrain` first) "
                                  "or extractor.mode=joint")
        torch.manual_seed(cfg.optim.seed)
        model = ConditionalDenoiser(build_schedule(e.T, e.schedule), e.latent_channels, e.feature_channels)
        latent = sample_fixed_latent((e.latent_channels, cfg.scene.H // 4, cfg.scene.W // 4), e.latent_seed)
        payload = extractor_payload(model, latent)
        payload["extractor_key"] = extractor_key(cfg)
        return payload
    payload = load_checkpoint(e.checkpoint, kind="extractor")
    if payload.get("extractor_key") != extractor_key(cfg):
        raise InvalidConfiguration(
            f"extractor checkpoint {e.checkpoint} was built for a different scene size, schedule or latent "
            "than this config; refusing to mix them")
    return payload


def resolve_bank(cfg: ExperimentConfig) -> PrototypeBank:
    o = cfg.objective
    bank = PrototypeBank.load(o.bank_path) if o.bank_path else \
        PrototypeBank.random_orthogonal(o.n, cfg.model.pa_dim, o.bank_seed)
    if bank.n != o.n:
        raise InvalidConfiguration(f"prototype bank holds {bank.n} prototypes but objective.n = {o.n}")
    return bank


# --- training ----------------------------------------------------------------

def run_id(cfg: ExperimentConfig) -> str:
    """Content-derived identifier: identical configs share an id."""
    return "run-" + config_hash(cfg)[:12]


def cmd_train(cfg: ExperimentConfig, out, resume: bool = False, data=None) -> MetricsReport:
    """Train a counting model, checkpointing at every evaluation.

    With ``resume`` the run continues from ``out/last.ckpt``, which must have
    been written under an identical configuration.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    train_scenes, test_scenes = data if data is not None else load_splits(cfg)
    if not train_scenes:
        raise InvalidInput("the dataset has no training scenes")
    extractor_state = resolve_extractor(cfg)
    o = cfg.objective
    train = stack_scenes(train_scenes, o.density_sigma, o.n)
    test = stack_scenes(test_scenes, o.density_sigma, o.n) if test_scenes else None
    trainer = Trainer(cfg, train, test, extractor_state, resolve_bank(cfg))
    chash = config_hash(cfg)
    if resume:
        payload = load_checkpoint(out / LAST_FILE, kind="counting")
        if payload["config_hash"] != chash:
            raise InvalidConfiguration(f"{out / LAST_FILE} was written under config {payload['config_hash']}, "
                                       f"current config is {chash}; refusing to resume")
        trainer.load_state_dict(payload["trainer"])
        log.info("resumed at step %d", trainer.step)
    save_config(cfg, out / CONFIG_FILE)
    t0 = time.perf_counter()

    def on_eval(tr: Trainer, m: dict):
        log.info("epoch %d  loss %.5f  GAME0 %.3f  RMSE %.3f", m["epoch"], m["train_loss"], m["game0"], m["rmse"])
        payload = tr.checkpoint_payload(extractor_state)
        save_checkpoint(out / LAST_FILE, payload)
        if m["game0"] <= min(e["game0"] for e in tr.history.evals):
            save_checkpoint(out / BEST_FILE, payload)

    trainer.fit(on_eval=on_eval)
    save_checkpoint(out / LAST_FILE, trainer.checkpoint_payload(extractor_state))
    splits = {"train": trainer.evaluate(train, "train")}
    if test is not None:
        splits["test"] = trainer.history.evals[-1] if trainer.history.evals else trainer.evaluate(test, "test")
        splits["test"] = {k: splits["test"][k] for k in ("game0", "game1", "game2", "game3", "mae", "rmse")}
    report = MetricsReport(
        run_id=run_id(cfg), config_hash=chash, splits=splits,
        epoch_losses=trainer.history.epoch_losses(trainer.steps_per_epoch),
        evals=list(trainer.history.evals), wall_clock=time.perf_counter() - t0,
    )
    if trainer.history.evals:
        report.extra["best"] = min(trainer.history.evals, key=lambda e: e["game0"])
    write_report(report, out)
    return report


def load_trainer(checkpoint) -> Trainer:
    """Rebuild a trainer (model, bank, optimizer state) from a counting checkpoint."""
    payload = load_checkpoint(checkpoint, kind="counting")
    cfg = parse_config(payload["config"], source=str(checkpoint))
    if config_hash(cfg) != payload["config_hash"]:
        raise InvalidConfiguration(f"{checkpoint}: stored config does not match its recorded hash")
    empty = stack_scenes([generate_scene(cfg.scene, 0)], cfg.objective.density_sigma, cfg.objective.n)
    bank = PrototypeBank(payload["bank"].numpy(), payload.get("bank_source", "checkpoint"))
    trainer = Trainer(cfg, empty, None, payload["extractor"], bank)
    trainer.load_state_dict(payload["trainer"])
    trainer.stored_steps_per_epoch = int(payload["steps_per_epoch"])
    return trainer


def cmd_evaluate(checkpoint, cfg: ExperimentConfig, out=None, split: str = "test") -> MetricsReport:
    """Score a counting checkpoint on one split of the dataset named by ``cfg.data.root``."""
    trainer = load_trainer(checkpoint)
    tcfg = trainer.cfg
    if (cfg.scene.H, cfg.scene.W) != (tcfg.scene.H, tcfg.scene.W):
        raise InvalidConfiguration("checkpoint and evaluation config disagree on scene size")
    train, test = load_splits(tcfg, root=cfg.data.root)
    scenes = {"train": train, "test": test}.get(split)
    if scenes is None:
        raise InvalidConfiguration(f"unknown split {split!r}; expected train or test")
    if not scenes:
        raise InvalidInput(f"split {split!r} of {cfg.data.root} is empty")
    t0 = time.perf_counter()
    data = stack_scenes(scenes, tcfg.objective.density_sigma, tcfg.objective.n)
    metrics = trainer.evaluate(data, split)
    report = MetricsReport(
        run_id=run_id(tcfg), config_hash=config_hash(tcfg), splits={split: metrics},
        epoch_losses=trainer.history.epoch_losses(trainer.stored_steps_per_epoch),
        evals=list(trainer.history.evals), wall_clock=time.perf_counter() - t0,
        extra={"checkpoint": str(checkpoint), "dataset": str(cfg.data.root)},
    )
    if out is not None:
        write_report(report, out)
    return report
