"""Counting-network training and evaluation.

Randomness is never drawn from global state. Every random decision made at
optimizer step ``k`` comes from a generator seeded by ``(seed, k, purpose)``,
so a run is reproducible from its config alone and resuming from a
checkpoint replays exactly the same trajectory.
"""
from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ExperimentConfig, config_hash, render_config
from .counting_net import CountingModel, cells_to_density
from .errors import InvalidConfiguration, NumericFailure
from .extractor import (
    ConditionalDenoiser,
    FixedLatent,
    PretrainConfig,
    build_schedule,
    extractor_from_payload,
    extractor_payload,
    pretrain_extractor,
    sample_fixed_latent,
)
from .metrics_density import evaluate_counts, rasterize_density
from .objectives import (
    PrototypeBank,
    PrototypeProjection,
    ce_loss_variant,
    local_counts,
    pa_loss,
    reg_loss,
    total_loss,
)
from .scenes import Scene, person_target

log = logging.getLogger(__name__)

PURPOSES = {"perm": 1, "pa": 2, "latent": 3, "reinject": 4, "eval": 5}


def derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) & (2**64 - 1) for p in parts]).generate_state(1, np.uint64)[0] >> 1)


def derived_generator(*parts: int) -> torch.Generator:
    return torch.Generator().manual_seed(derived_seed(*parts))


@dataclass
class SceneTensors:
    """Scenes stacked into training tensors."""

    thermal: torch.Tensor  # (N, 1, H, W)
    depth: torch.Tensor  # (N, 1, H, W)
    cells: torch.Tensor  # (N, 1, H/4, W/4) ground-truth counts per cell
    labels: torch.Tensor  # (N, H/4, W/4) count classes
    points: list
    index: list[int]

    def __len__(self):
        return len(self.index)


def stack_scenes(scenes: list[Scene], sigma: float, n_classes: int, stride: int = 4) -> SceneTensors:
    dens = np.stack([rasterize_density(s.points, sigma) for s in scenes])
    H, W = dens.shape[1:]
    cells = dens.reshape(len(scenes), H // stride, stride, W // stride, stride).sum(axis=(2, 4))
    return SceneTensors(
        thermal=torch.tensor(np.stack([s.thermal for s in scenes]), dtype=torch.float32)[:, None],
        depth=torch.tensor(np.stack([s.depth_est for s in scenes]), dtype=torch.float32)[:, None],
        cells=torch.tensor(cells, dtype=torch.float32)[:, None],
        labels=local_counts(dens, stride, n_classes),
        points=[s.points for s in scenes],
        index=[s.index for s in scenes],
    )


def extractor_key(cfg: ExperimentConfig) -> str:
    """Hash of the settings a counting run must share with its pretrained extractor.

    Pretraining length, step size and seed are deliberately left out: any
    extractor of the right shape, schedule and latent is usable, and those
    settings are recorded in the checkpoint for provenance instead.
    """
    e = cfg.extractor
    relevant = (cfg.scene.H, cfg.scene.W, e.T, e.schedule, e.latent_seed, e.latent_channels, e.feature_channels)
    return config_hash_text(repr(relevant))


def config_hash_text(text: str) -> str:
    import hashlib
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def run_pretraining(cfg: ExperimentConfig, scenes: list[Scene], log_every: int = 0):
    """Pretrain the depth-conditioned denoiser on training scenes; returns ``(payload, losses)``."""
    e = cfg.extractor
    schedule = build_schedule(e.T, e.schedule)
    torch.manual_seed(cfg.optim.seed)
    model = ConditionalDenoiser(schedule, e.latent_channels, e.feature_channels)
    latent = sample_fixed_latent((e.latent_channels, cfg.scene.H // 4, cfg.scene.W // 4), e.latent_seed)
    conds = np.stack([s.depth_est for s in scenes])
    targets = np.stack([person_target(s) for s in scenes])
    pcfg = PretrainConfig(e.pretrain_steps, e.pretrain_batch, e.pretrain_lr, 1e-4, e.cond_dropout,
                          e.huber_c, cfg.optim.seed)

    def _log(step, loss):
        if log_every and step % log_every == 0:
            log.info("pretrain step %d loss %.6f", step, loss)

    result = pretrain_extractor(conds, targets, schedule, pcfg, model, log=_log)
    payload = extractor_payload(result.model, latent, e.pretrain_steps)
    payload["extractor_key"] = extractor_key(cfg)
    payload["pretrain"] = dataclasses.asdict(pcfg)
    return payload, result.losses


@dataclass
class History:
    steps: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    reg: list[float] = field(default_factory=list)
    aux: list[float] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)

    def epoch_losses(self, steps_per_epoch: int) -> list[float]:
        out = []
        for e in range(0, len(self.losses), steps_per_epoch):
            out.append(float(np.mean(self.losses[e:e + steps_per_epoch])))
        return out


class Trainer:
    """Owns the counting model, its auxiliary loss modules and the optimizer."""

    def __init__(self, cfg: ExperimentConfig, train: SceneTensors, test: SceneTensors | None = None,
                 extractor_state: dict | None = None, bank: PrototypeBank | None = None,
                 dtype=torch.float32):
        self.cfg = cfg
        self.train_data, self.test_data = train, test
        self.seed = cfg.optim.seed
        self.dtype = dtype
        extractor = latent = None
        if cfg.model.depth_mode == "extractor":
            if extractor_state is None:
                raise InvalidConfiguration("depth_mode=extractor needs a pretrained extractor")
            extractor, latent = extractor_from_payload(extractor_state)
        self.latent = latent
        torch.manual_seed(self.seed)
        self.model = CountingModel(cfg.model, extractor, latent,
                                   train_extractor=cfg.extractor.mode == "joint").to(dtype)
        obj = cfg.objective
        self.pa_cfg = obj.pa()
        self.bank = bank or PrototypeBank.random_orthogonal(obj.n, cfg.model.pa_dim, obj.bank_seed)
        torch.manual_seed(derived_seed(self.seed, 99))
        self.projection = PrototypeProjection(cfg.model.channels, self.bank.dim).to(dtype)
        self.classifier = nn.Linear(cfg.model.channels, obj.n).to(dtype)
        params = [p for p in self.model.parameters() if p.requires_grad]
        params += list(self.projection.parameters()) + list(self.classifier.parameters())
        self.optimizer = torch.optim.AdamW(params, lr=cfg.optim.lr, weight_decay=cfg.optim.weight_decay)
        self.step = 0
        self.history = History()
        self._cache: dict[str, torch.Tensor] = {}

    # -- bookkeeping --------------------------------------------------------
    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.train_data) / self.cfg.optim.batch_size)

    def _cacheable(self) -> bool:
        c = self.cfg
        return (c.model.depth_mode == "extractor" and c.extractor.mode == "frozen"
                and c.extractor.latent_mode == "fixed" and c.model.n_steps == 1)

    def _cached_features(self, split: str, data: SceneTensors) -> torch.Tensor:
        if split not in self._cache:
            with torch.no_grad():
                chunks = [self.model.depth_features(data.depth[i:i + 32].to(self.dtype))
                          for i in range(0, len(data), 32)]
            self._cache[split] = torch.cat(chunks)
        return self._cache[split]

    def batch_indices(self, step: int) -> torch.Tensor:
        spe, bs = self.steps_per_epoch, self.cfg.optim.batch_size
        epoch, pos = divmod(step, spe)
        perm = torch.randperm(len(self.train_data), generator=derived_generator(self.seed, PURPOSES["perm"], epoch))
        return perm[pos * bs:(pos + 1) * bs]

    def _td_features(self, data: SceneTensors, split: str, idx: torch.Tensor, step: int | None):
        """Depth-branch features for rows ``idx``; ``step=None`` means evaluation."""
        c = self.cfg
        if c.model.depth_mode != "extractor":
            return None
        if self._cacheable():
            return self._cached_features(split, data)[idx]
        depth = data.depth[idx].to(self.dtype)
        z = None
        if c.extractor.latent_mode == "resampled":
            gen = (derived_generator(self.seed, PURPOSES["latent"], step) if step is not None
                   else derived_generator(self.seed, PURPOSES["eval"], int(idx[0]), len(idx)))
            z = torch.randn((len(idx), *self.latent.shape), generator=gen).to(self.dtype)
        if step is None:
            seeds = [derived_seed(PURPOSES["eval"], data.index[i]) for i in idx.tolist()]
        else:
            seeds = [derived_seed(self.seed, PURPOSES["reinject"], step, j) for j in range(len(idx))]
        return self.model.depth_features(depth, z_T=z, rng_seed=seeds)

    # -- optimization -------------------------------------------------------
    def losses(self, idx: torch.Tensor, step: int):
        d = self.train_data
        thermal = d.thermal[idx].to(self.dtype)
        depth = d.depth[idx].to(self.dtype)
        td = self._td_features(d, "train", idx, step)
        pred, f_t = self.model(thermal, depth, td_features=td)
        scale = self.cfg.objective.density_scale
        reg = reg_loss(pred, scale * d.cells[idx].to(self.dtype), self.cfg.objective.count_weight)
        aux_kind = self.cfg.objective.aux
        if aux_kind == "pa":
            aux = pa_loss(f_t, d.labels[idx], self.bank, self.pa_cfg,
                          derived_generator(self.seed, PURPOSES["pa"], step), self.projection)
        elif aux_kind == "ce":
            aux = ce_loss_variant(f_t, d.labels[idx], self.classifier)
        else:
            aux = torch.zeros((), dtype=self.dtype)
        lam = self.cfg.objective.lam
        total = total_loss(reg, aux, lam) if lam > 0 else reg + 0 * aux.detach()
        return total, reg, aux

    def learning_rate(self, step: int) -> float:
        """Step size at ``step``: cosine decay to zero over ``optim.epochs``, or constant."""
        o = self.cfg.optim
        total = max(1, o.epochs * self.steps_per_epoch)
        if o.lr_schedule == "constant":
            return o.lr
        return o.lr * 0.5 * (1.0 + math.cos(math.pi * min(step, total) / total))

    def train_step(self) -> float:
        idx = self.batch_indices(self.step)
        for group in self.optimizer.param_groups:
            group["lr"] = self.learning_rate(self.step)
        total, reg, aux = self.losses(idx, self.step)
        if not torch.isfinite(total):
            raise NumericFailure(f"non-finite loss {total.item()} at step {self.step}")
        self.optimizer.zero_grad()
        total.backward()
        self.optimizer.step()
        self.history.steps.append(self.step)
        self.history.losses.append(total.item())
        self.history.reg.append(reg.item())
        self.history.aux.append(aux.item())
        self.step += 1
        return self.history.losses[-1]

    def fit(self, epochs: int | None = None, on_eval=None):
        """Train until ``epochs`` (default ``optim.epochs``) are complete, evaluating periodically."""
        epochs = self.cfg.optim.epochs if epochs is None else epochs
        spe = self.steps_per_epoch
        while self.step < epochs * spe:
            self.train_step()
            if self.step % spe == 0:
                epoch = self.step // spe
                if self.test_data is not None and (epoch % self.cfg.optim.eval_every == 0 or epoch == epochs):
                    m = self.evaluate(self.test_data, "test")
                    m.update(epoch=epoch, step=self.step,
                             train_loss=float(np.mean(self.history.losses[-spe:])))
                    self.history.evals.append(m)
                    if on_eval is not None:
                        on_eval(self, m)
        return self.history

    # -- evaluation ---------------------------------------------------------
    def predict_cells(self, data: SceneTensors, split: str = "test") -> torch.Tensor:
        out = []
        with torch.no_grad():
            for i in range(0, len(data), 32):
                idx = torch.arange(i, min(i + 32, len(data)))
                td = self._td_features(data, split, idx, None)
                pred, _ = self.model(data.thermal[idx].to(self.dtype), data.depth[idx].to(self.dtype),
                                     td_features=td)
                out.append(pred)
        pred = torch.cat(out) / self.cfg.objective.density_scale
        if not torch.isfinite(pred).all():
            raise NumericFailure("non-finite density prediction")
        return pred

    def evaluate(self, data: SceneTensors, split: str = "test") -> dict:
        cells = self.predict_cells(data, split)
        dens = [cells_to_density(c[0], self.model.stride) for c in cells]
        return evaluate_counts(dens, data.points)

    # -- persistence --------------------------------------------------------
    def state_dict(self) -> dict:
        return {
            "model": {k: v.detach().clone() for k, v in self.model.state_dict().items()},
            "projection": self.projection.state_dict(),
            "classifier": self.classifier.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "step": self.step,
            "history": self.history,
        }

    def load_state_dict(self, state: dict):
        self.model.load_state_dict(state["model"])
        self.projection.load_state_dict(state["projection"])
        self.classifier.load_state_dict(state["classifier"])
        self.optimizer.load_state_dict(state["optimizer"])
        self.step = int(state["step"])
        self.history = state["history"]
        self._cache.clear()

    def checkpoint_payload(self, extractor_state: dict | None) -> dict:
        return {
            "kind": "counting",
            "config": render_config(self.cfg),
            "config_hash": config_hash(self.cfg),
            "extractor": extractor_state,
            "bank": torch.tensor(self.bank.vectors),
            "bank_source": self.bank.source,
            "epoch": self.step // self.steps_per_epoch,
            "steps_per_epoch": self.steps_per_epoch,
            "trainer": self.state_dict(),
        }


def parameter_vector(module: nn.Module) -> torch.Tensor:
    return torch.cat([p.detach().reshape(-1) for p in module.parameters()])


@dataclass
class TrainResult:
    trainer: Trainer
    best: dict
    final: dict
    wall_clock: float


def train_counting(cfg: ExperimentConfig, train: SceneTensors, test: SceneTensors,
                   extractor_state: dict | None = None, bank: PrototypeBank | None = None,
                   on_best=None) -> TrainResult:
    """Full training run with best-by-GAME(0) selection on the test split."""
    t0 = time.perf_counter()
    trainer = Trainer(cfg, train, test, extractor_state, bank)
    best = {}

    def on_eval(tr, m):
        nonlocal best
        log.info("epoch %d  loss %.5f  GAME0 %.3f  RMSE %.3f", m["epoch"], m["train_loss"], m["game0"], m["rmse"])
        if not best or m["game0"] < best["game0"]:
            best = dict(m)
            if on_best is not None:
                on_best(tr, m)

    trainer.fit(on_eval=on_eval)
    final = trainer.history.evals[-1] if trainer.history.evals else trainer.evaluate(test)
    return TrainResult(trainer, best or final, final, time.perf_counter() - t0)
