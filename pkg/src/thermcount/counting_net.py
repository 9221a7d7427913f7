"""Counting network: thermal encoder, cross-attention feature enhancer, density head.

The head predicts person counts per ``stride x stride`` cell of the input. A
pixel-level density map is obtained by spreading each cell's count evenly over
its pixels (``cell / stride**2``), so the map's sum equals the predicted count.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidConfiguration, InvalidInput, InvalidParameter
from .extractor import ConditionalDenoiser, FixedLatent, extract_features

DEPTH_MODES = ("none", "raw", "extractor")


class ThermalEncoder(nn.Module):
    """Four conv blocks with two stride-2 stages: ``(B, 1, H, W) -> (B, C, H/4, W/4)``."""

    stride = 4

    def __init__(self, channels: int = 16, in_channels: int = 1):
        super().__init__()
        c = channels
        self.out_channels = c
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, c, 3, padding=1), nn.ReLU(),
            nn.Conv2d(c, c, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(c, c, 3, padding=1), nn.ReLU(),
            nn.Conv2d(c, c, 3, stride=2, padding=1), nn.ReLU(),
        )

    def forward(self, x):
        if x.shape[-2] % self.stride or x.shape[-1] % self.stride:
            raise InvalidInput(f"input {tuple(x.shape[-2:])} not divisible by encoder stride {self.stride}")
        return self.net(x)


class CrossAttention(nn.Module):
    """Single-head attention of query cells over key/value cells, with a residual.

    No positional encoding is added, so permuting the key/value cells together
    leaves the output unchanged.
    """

    def __init__(self, q_channels: int, kv_channels: int, width: int, zero_init_out: bool = True):
        super().__init__()
        self.q = nn.Linear(q_channels, width)
        self.k = nn.Linear(kv_channels, width)
        self.v = nn.Linear(kv_channels, width)
        self.o = nn.Linear(width, q_channels)
        self.scale = 1.0 / math.sqrt(width)
        if zero_init_out:
            nn.init.zeros_(self.o.weight)
            nn.init.zeros_(self.o.bias)

    def forward(self, queries, context, return_weights=False):
        """``queries`` is ``(B, Nq, Cq)``, ``context`` is ``(B, Nk, Ckv)``."""
        attn = torch.softmax(self.q(queries) @ self.k(context).transpose(1, 2) * self.scale, dim=-1)
        out = queries + self.o(attn @ self.v(context))
        return (out, attn) if return_weights else out


class FeatureEnhancer(nn.Module):
    """Thermal cells attend to depth-derived cells, then refine against the thermal cells again."""

    def __init__(self, thermal_channels: int, depth_channels: int, width: int = 16, zero_init_out: bool = True):
        super().__init__()
        self.cross = CrossAttention(thermal_channels, depth_channels, width, zero_init_out)
        self.refine = CrossAttention(thermal_channels, thermal_channels, width, zero_init_out)

    def forward(self, f_t, f_td, return_weights=False):
        B, C, h, w = f_t.shape
        if f_td.shape[-2:] != f_t.shape[-2:]:
            f_td = F.interpolate(f_td, size=(h, w), mode="bilinear", align_corners=False)
        t = f_t.flatten(2).transpose(1, 2)
        d = f_td.flatten(2).transpose(1, 2)
        if d.shape[-1] != self.cross.k.in_features:
            raise InvalidConfiguration(f"depth features have {d.shape[-1]} channels, enhancer expects "
                                       f"{self.cross.k.in_features}")
        x, w1 = self.cross(t, d, return_weights=True)
        x, w2 = self.refine(x, t, return_weights=True)
        out = x.transpose(1, 2).reshape(B, C, h, w)
        return (out, (w1, w2)) if return_weights else out


class RegressionHead(nn.Module):
    """Four 3x3/1x1 convs, each followed by ReLU; the last yields one nonnegative channel."""

    def __init__(self, channels: int = 16):
        super().__init__()
        c = channels
        self.net = nn.Sequential(
            nn.Conv2d(c, c, 3, padding=1), nn.ReLU(),
            nn.Conv2d(c, c, 3, padding=1), nn.ReLU(),
            nn.Conv2d(c, c // 2, 3, padding=1), nn.ReLU(),
            nn.Conv2d(c // 2, 1, 1), nn.ReLU(),
        )
        nn.init.constant_(self.net[-2].bias, 0.05)  # keep the output rectifier alive at init

    def forward(self, x):
        return self.net(x)


@dataclass
class ModelConfig:
    channels: int = 16
    attn_width: int = 16
    depth_mode: str = "extractor"
    n_steps: int = 1
    pa_dim: int = 16

    def __post_init__(self):
        if self.depth_mode not in DEPTH_MODES:
            raise InvalidParameter(f"depth_mode must be one of {DEPTH_MODES}, got {self.depth_mode!r}")
        if self.n_steps < 1:
            raise InvalidParameter("n_steps must be >= 1")


class CountingModel(nn.Module):
    """Thermal-only counter, optionally enhanced by depth-derived features.

    ``depth_mode`` selects the second stream: ``none`` bypasses the enhancer,
    ``raw`` runs the estimated depth through its own copy of the thermal encoder,
    ``extractor`` uses denoiser features started from the fixed latent.
    Inputs are thermal and estimated depth only.
    """

    def __init__(self, config: ModelConfig, extractor: ConditionalDenoiser | None = None,
                 latent: FixedLatent | None = None, train_extractor: bool = False):
        super().__init__()
        self.config = config
        c = config.channels
        self.encoder = ThermalEncoder(c)
        self.stride = self.encoder.stride
        self.head = RegressionHead(c)
        self.depth_encoder = None
        self.extractor = None
        self.latent = latent
        self.enhancer = None
        if config.depth_mode == "raw":
            self.depth_encoder = ThermalEncoder(c)
            self.enhancer = FeatureEnhancer(c, c, config.attn_width)
        elif config.depth_mode == "extractor":
            if extractor is None or latent is None:
                raise InvalidConfiguration("extractor mode needs a denoiser and a fixed latent")
            self.extractor = extractor
            self.extractor.requires_grad_(train_extractor)
            self.enhancer = FeatureEnhancer(c, extractor.feature_channels, config.attn_width)
        self.train_extractor = train_extractor

    def depth_features(self, depth_est, z_T=None, rng_seed=0):
        """``F_TD`` for a batch of depth maps; ``z_T`` overrides the fixed latent."""
        if self.config.depth_mode == "raw":
            return self.depth_encoder(depth_est)
        if self.config.depth_mode == "extractor":
            latent = self.latent if z_T is None else z_T
            with torch.set_grad_enabled(self.train_extractor and torch.is_grad_enabled()):
                return extract_features(self.extractor, latent, depth_est, self.config.n_steps, rng_seed).values
        return None

    def forward(self, thermal, depth_est=None, td_features=None, z_T=None, rng_seed=0):
        """Return ``(cell_counts, F_T)`` with ``cell_counts`` of shape ``(B, 1, H/4, W/4)``."""
        f_t = self.encoder(thermal)
        if self.enhancer is None:
            f_e = f_t
        else:
            if td_features is None:
                if depth_est is None:
                    raise InvalidInput(f"depth_mode={self.config.depth_mode!r} needs depth_est")
                td_features = self.depth_features(depth_est, z_T, rng_seed)
            f_e = self.enhancer(f_t, td_features.to(f_t.dtype))
        return self.head(f_e), f_t


def cells_to_density(cells: torch.Tensor, stride: int) -> np.ndarray:
    """Spread per-cell counts uniformly over their pixels: ``(h, w) -> (h*s, w*s)``."""
    c = cells.detach().double().cpu().numpy().reshape(cells.shape[-2:])
    return np.kron(c, np.ones((stride, stride))) / stride**2


def predict_density(model: CountingModel, thermal, depth_est, rng_seed=0) -> np.ndarray:
    """Pixel-resolution density map of one scene; its sum is the predicted count."""
    dtype = next(model.parameters()).dtype
    t = torch.as_tensor(np.asarray(thermal), dtype=dtype).reshape(1, 1, *np.shape(thermal))
    d = torch.as_tensor(np.asarray(depth_est), dtype=dtype).reshape(1, 1, *np.shape(depth_est))
    with torch.no_grad():
        cells, _ = model(t, d, rng_seed=rng_seed)
    return cells_to_density(cells[0, 0], model.stride)
