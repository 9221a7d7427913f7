"""Depth-conditioned toy consistency model used as a frozen-latent feature extractor.

The denoiser works directly at 1/4 of the scene resolution with 4 latent
channels (there is no autoencoder). It is trained to predict the clean
latent ``z0`` from ``z_tau = alpha(tau) * z0 + sigma(tau) * eps`` so a single
call from pure noise already returns a usable estimate. Features are tapped
from the last hidden layer, right before the projection into latent space.

Extraction starts from one shared, once-sampled latent ``z_T``. That makes the
features a deterministic function of the depth map alone.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import InvalidInput, InvalidParameter

SCHEDULE_KINDS = ("cosine", "cosine_offset")


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance-preserving schedule over integer timesteps ``0..T``."""

    T: int
    kind: str = "cosine"
    alphas: np.ndarray = field(repr=False, compare=False, default=None)
    sigmas: np.ndarray = field(repr=False, compare=False, default=None)

    def alpha(self, tau) -> float:
        return float(self.alphas[self._index(tau)])

    def sigma(self, tau) -> float:
        return float(self.sigmas[self._index(tau)])

    def _index(self, tau) -> int:
        t = int(tau)
        if t != tau or not 0 <= t <= self.T:
            raise InvalidParameter(f"timestep {tau} outside 0..{self.T}")
        return t

    def subsequence(self, n: int) -> list[int]:
        """``n`` descending timesteps starting at ``T``, evenly spaced in index space."""
        return [int(round(self.T * (1 - k / n))) for k in range(n)]

    def describe(self) -> dict:
        return {"T": self.T, "kind": self.kind}


def build_schedule(T: int = 1000, kind: str = "cosine") -> NoiseSchedule:
    """Cosine-family VP schedule.

    ``cosine`` uses ``alpha = cos(pi/2 * t/T)``; ``cosine_offset`` is the
    offset form ``alpha^2 = f(t)/f(0)`` with ``f(t) = cos^2((t/T + s)/(1 + s) * pi/2)``.
    In both, ``sigma = sqrt(1 - alpha^2)`` computed as a sine so the identity
    holds to rounding.
    """
    if T < 2:
        raise InvalidParameter(f"schedule needs T >= 2, got {T}")
    t = np.arange(T + 1, dtype=np.float64) / T
    if kind == "cosine":
        theta = 0.5 * np.pi * t
    elif kind == "cosine_offset":
        s = 0.008
        f = np.cos((t + s) / (1 + s) * 0.5 * np.pi)
        theta = np.arccos(np.clip(f / f[0], 0.0, 1.0))
    else:
        raise InvalidParameter(f"unknown schedule kind {kind!r}; choose from {SCHEDULE_KINDS}")
    alphas, sigmas = np.cos(theta), np.sin(theta)
    alphas[0], sigmas[0] = 1.0, 0.0
    alphas.setflags(write=False)
    sigmas.setflags(write=False)
    return NoiseSchedule(int(T), kind, alphas, sigmas)


@dataclass(frozen=True)
class FixedLatent:
    """The shared starting latent ``z_T``. Values come from numpy's PCG64 stream."""

    seed: int
    shape: tuple[int, ...]
    values: np.ndarray = field(repr=False, compare=False)

    def tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.from_numpy(np.array(self.values)).to(dtype)

    def __eq__(self, other):
        if not isinstance(other, FixedLatent):
            return NotImplemented
        return self.seed == other.seed and self.shape == other.shape and np.array_equal(self.values, other.values)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "shape": list(self.shape), "values": torch.from_numpy(np.array(self.values))}

    @classmethod
    def from_dict(cls, d: dict) -> "FixedLatent":
        latent = sample_fixed_latent(tuple(d["shape"]), d["seed"])
        stored = d["values"].numpy()
        if not np.array_equal(stored, latent.values):
            # regenerate-and-compare guards against PRNG drift; the stored copy wins
            latent = cls(int(d["seed"]), tuple(d["shape"]), stored.copy())
        return latent


def sample_fixed_latent(shape: Sequence[int], seed: int) -> FixedLatent:
    shape = tuple(int(s) for s in shape)
    if not shape or min(shape) <= 0:
        raise InvalidParameter(f"latent dims must be positive, got {shape}")
    rng = np.random.Generator(np.random.PCG64(int(seed) & (2**64 - 1)))
    values = rng.standard_normal(shape)
    values.setflags(write=False)
    return FixedLatent(int(seed), shape, values)


def timestep_embedding(tau: torch.Tensor, T: int, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(1000.0) * torch.arange(half, dtype=tau.dtype) / half)
    args = (tau / T * 1000.0)[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class ConditionalDenoiser(nn.Module):
    """Small conv net mapping ``(z_tau, tau, depth)`` to ``(z0_hat, features)``.

    The depth image is encoded down to the latent grid by two stride-2 convs,
    fused with the latent and a FiLM-style timestep embedding, refined by two
    residual blocks, and projected to the latent by a zero-initialized conv.
    """

    def __init__(self, schedule: NoiseSchedule, latent_channels=4, feature_channels=16,
                 downsample=4, temb_dim=32):
        super().__init__()
        if downsample != 4:
            raise InvalidParameter("the toy denoiser is built for a downsample factor of 4")
        self.schedule = schedule
        self.latent_channels = latent_channels
        self.feature_channels = feature_channels
        self.downsample = downsample
        self.temb_dim = temb_dim
        c = feature_channels
        self.cond_enc = nn.Sequential(
            nn.Conv2d(1, c, 3, padding=1), nn.ReLU(),
            nn.Conv2d(c, c, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(c, c, 3, stride=2, padding=1),
        )
        self.z_in = nn.Conv2d(latent_channels, c, 3, padding=1)
        self.temb = nn.Sequential(nn.Linear(temb_dim, c), nn.ReLU(), nn.Linear(c, 2 * c))
        self.blocks = nn.ModuleList(
            nn.Sequential(nn.Conv2d(c, c, 3, padding=1), nn.ReLU(), nn.Conv2d(c, c, 3, padding=1))
            for _ in range(2)
        )
        self.out = nn.Conv2d(c, latent_channels, 3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def hparams(self) -> dict:
        return {"latent_channels": self.latent_channels, "feature_channels": self.feature_channels,
                "downsample": self.downsample, "temb_dim": self.temb_dim}

    def forward(self, z, tau, cond):
        scale, shift = self.temb(timestep_embedding(tau, self.schedule.T, self.temb_dim)).chunk(2, dim=1)
        h = self.z_in(z) + self.cond_enc(cond)
        h = F.relu(h * (1 + scale[:, :, None, None]) + shift[:, :, None, None])
        for block in self.blocks:
            h = F.relu(h + block(h))
        return self.out(h), h


@dataclass
class FeatureTensor:
    """Extracted ``F_TD`` with the inputs that determine it."""

    values: torch.Tensor
    n_steps: int
    latent_seed: int
    rng_seed: object


def _as_batch(z, cond):
    if cond.dim() == 2:
        cond = cond[None, None]
    elif cond.dim() == 3:
        cond = cond[:, None]
    if z.dim() == 3:
        z = z[None].expand(cond.shape[0], *z.shape)
    return z, cond


def denoise_step(model: ConditionalDenoiser, z: torch.Tensor, tau, cond: torch.Tensor):
    """One forward pass: returns ``(z0_hat, features)`` for a batch.

    ``z`` is ``(B, C, h, w)`` or a single ``(C, h, w)`` latent broadcast over the
    batch; ``cond`` is ``(B, 1, H, W)``, ``(B, H, W)`` or ``(H, W)``.
    """
    z, cond = _as_batch(z, cond)
    f = model.downsample
    exp = (model.latent_channels, cond.shape[-2] // f, cond.shape[-1] // f)
    if tuple(z.shape[1:]) != exp or z.shape[0] != cond.shape[0]:
        raise InvalidInput(f"latent shape {tuple(z.shape)} incompatible with condition {tuple(cond.shape)}")
    if cond.shape[-2] % f or cond.shape[-1] % f:
        raise InvalidInput(f"condition size {tuple(cond.shape[-2:])} not divisible by {f}")
    if not torch.is_tensor(tau):
        tau = torch.full((z.shape[0],), float(tau), dtype=z.dtype)
    return model(z, tau.to(z.dtype), cond.to(z.dtype))


NoiseSource = Callable[[tuple], torch.Tensor]


def reinject_noise(z0_hat: torch.Tensor, tau_n: int, schedule: NoiseSchedule, rng) -> torch.Tensor:
    """``alpha(tau_n) * z0_hat + sigma(tau_n) * eps``.

    ``rng`` is a ``torch.Generator``, a list of generators (one per batch row),
    or any callable returning noise of a requested shape.
    """
    a, s = schedule.alpha(tau_n), schedule.sigma(tau_n)
    if s == 0.0:
        return z0_hat.clone() if a == 1.0 else a * z0_hat
    if callable(rng):
        eps = rng(tuple(z0_hat.shape))
    elif isinstance(rng, (list, tuple)):
        eps = torch.stack([torch.randn(z0_hat.shape[1:], generator=g, dtype=z0_hat.dtype) for g in rng])
    else:
        eps = torch.randn(z0_hat.shape, generator=rng, dtype=z0_hat.dtype)
    return a * z0_hat + s * eps.to(z0_hat.dtype)


def extract_features(model: ConditionalDenoiser, fixed_latent, cond: torch.Tensor, n_steps: int = 1,
                     rng_seed=0) -> FeatureTensor:
    """Features of the last denoising step along an ``n_steps`` LCM trajectory.

    ``fixed_latent`` is a :class:`FixedLatent` (shared across the batch) or a
    raw ``(B, C, h, w)`` tensor of per-sample starting latents. ``rng_seed``
    may be one int for the whole batch or one per sample; it is only consumed
    when ``n_steps > 1``.
    """
    if n_steps < 1:
        raise InvalidParameter(f"n_steps must be >= 1, got {n_steps}")
    dtype = next(model.parameters()).dtype
    if isinstance(fixed_latent, FixedLatent):
        z, latent_seed = fixed_latent.tensor(dtype), fixed_latent.seed
    else:
        z, latent_seed = fixed_latent.to(dtype), None
    z, cond = _as_batch(z, cond)
    schedule = model.schedule
    taus = schedule.subsequence(n_steps)
    z0, feats = denoise_step(model, z, taus[0], cond)
    if n_steps > 1:
        if isinstance(rng_seed, (list, tuple, np.ndarray)):
            gens = [torch.Generator().manual_seed(int(s)) for s in rng_seed]
        else:
            gens = [torch.Generator().manual_seed(int(rng_seed) * 100003 + b) for b in range(z.shape[0])]
        for tau in taus[1:]:
            z = reinject_noise(z0, tau, schedule, gens)
            z0, feats = denoise_step(model, z, tau, cond)
    return FeatureTensor(feats, n_steps, latent_seed, rng_seed)


def default_huber_c(dim: int) -> float:
    return 0.00054 * math.sqrt(dim)


def pseudo_huber(e, c: float):
    """Mean of ``c**2 * (sqrt(1 + (e/c)**2) - 1)``; quadratic near 0, linear in the tails."""
    if not c > 0:
        raise InvalidParameter(f"pseudo-Huber scale must be > 0, got {c}")
    if not torch.is_tensor(e):
        e = torch.as_tensor(np.asarray(e, dtype=np.float64))
    return (c * c * (torch.sqrt(1 + (e / c) ** 2) - 1)).mean()


def schedule_error_surrogate(schedule: NoiseSchedule, taus: Sequence[int]) -> float:
    """``sum(sqrt(tau_n))`` over a strictly decreasing timestep sequence."""
    taus = list(taus)
    for a, b in zip(taus, taus[1:]):
        if not b < a:
            raise InvalidInput(f"timesteps must be strictly decreasing, got {taus}")
    if any(not 0 <= t <= schedule.T for t in taus):
        raise InvalidInput(f"timesteps must lie in [0, {schedule.T}]")
    return float(sum(math.sqrt(t) for t in taus))


# --- pretraining -------------------------------------------------------------

@dataclass
class PretrainConfig:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 2e-3
    weight_decay: float = 1e-4
    cond_dropout: float = 0.5
    huber_c: float = 0.0  # 0 selects 0.00054 * sqrt(latent size)
    seed: int = 0


@dataclass
class PretrainResult:
    model: ConditionalDenoiser
    losses: list[float]
    dropped_fraction: float


def pretraining_loss(model, target, cond, tau, eps, keep, huber_c):
    """x0-prediction loss for one batch; ``keep`` zeroes the dropped conditions."""
    a = torch.tensor(model.schedule.alphas, dtype=target.dtype)[tau]
    s = torch.tensor(model.schedule.sigmas, dtype=target.dtype)[tau]
    z = a[:, None, None, None] * target + s[:, None, None, None] * eps
    z0, _ = model(z, tau.to(target.dtype), cond * keep[:, None, None, None])
    return pseudo_huber(z0 - target, huber_c)


def pretrain_extractor(conds: np.ndarray, targets: np.ndarray, schedule: NoiseSchedule,
                       config: PretrainConfig = PretrainConfig(), model: ConditionalDenoiser | None = None,
                       log: Callable[[int, float], None] | None = None) -> PretrainResult:
    """Train the denoiser on ``(depth_est, person_target)`` pairs.

    Args:
        conds: ``(N, H, W)`` estimated depth maps.
        targets: ``(N, 4, H/4, W/4)`` clean latents from :func:`scenes.person_target`.
    """
    if len(conds) == 0:
        raise InvalidInput("cannot pretrain on an empty dataset")
    gen = torch.Generator().manual_seed(int(config.seed))
    if model is None:
        torch.manual_seed(int(config.seed))
        model = ConditionalDenoiser(schedule)
    conds_t = torch.as_tensor(np.asarray(conds), dtype=torch.float32)[:, None]
    targets_t = torch.as_tensor(np.asarray(targets), dtype=torch.float32)
    c = config.huber_c or default_huber_c(targets_t[0].numel())
    opt = torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    losses, dropped = [], 0
    n = len(conds_t)
    for step in range(config.steps):
        idx = torch.randint(n, (config.batch_size,), generator=gen)
        tau = torch.randint(1, schedule.T + 1, (config.batch_size,), generator=gen)
        eps = torch.randn(targets_t[idx].shape, generator=gen)
        keep = (torch.rand(config.batch_size, generator=gen) >= config.cond_dropout).float()
        dropped += int((keep == 0).sum())
        loss = pretraining_loss(model, targets_t[idx], conds_t[idx], tau, eps, keep, c)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if log is not None:
            log(step, losses[-1])
    return PretrainResult(model, losses, dropped / (config.steps * config.batch_size))


def extractor_payload(model: ConditionalDenoiser, latent: FixedLatent, step: int = 0) -> dict:
    return {
        "kind": "extractor",
        "schedule": model.schedule.describe(),
        "latent": latent.to_dict(),
        "hparams": model.hparams(),
        "state": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "step": int(step),
    }


def extractor_from_payload(payload: dict) -> tuple[ConditionalDenoiser, FixedLatent]:
    schedule = build_schedule(**payload["schedule"])
    model = ConditionalDenoiser(schedule, **payload["hparams"])
    model.load_state_dict(payload["state"])
    return model, FixedLatent.from_dict(payload["latent"])


def save_extractor(path, model: ConditionalDenoiser, latent: FixedLatent, step: int = 0):
    return save_checkpoint(path, extractor_payload(model, latent, step))


def load_extractor(path) -> tuple[ConditionalDenoiser, FixedLatent, int]:
    payload = load_checkpoint(path, kind="extractor")
    model, latent = extractor_from_payload(payload)
    return model, latent, payload["step"]
