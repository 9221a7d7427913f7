"""Training objectives: prototype alignment, density regression, and their sum.

Prototype alignment pulls every sampled thermal feature cell toward the
count prototype of its local ground-truth count, through a temperature-scaled
softmax over cosine similarities to all prototypes.
"""
from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidConfiguration, InvalidInput, InvalidParameter, ParseError

BANK_MAGIC = b"TDPB"
BANK_VERSION = 1


@dataclass(frozen=True, eq=False)
class PrototypeBank:
    """``n`` unit-norm count prototypes of width ``dim``; row ``c`` stands for "c persons"."""

    vectors: np.ndarray
    source: str = "random-orthogonal"

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 1:
            raise InvalidParameter(f"prototype bank needs shape (n >= 1, dim), got {v.shape}")
        v = v / np.linalg.norm(v, axis=1, keepdims=True)
        v.setflags(write=False)
        object.__setattr__(self, "vectors", v)

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.tensor(self.vectors, dtype=dtype)

    @classmethod
    def random_orthogonal(cls, n: int, dim: int, seed: int = 0) -> "PrototypeBank":
        if n < 1 or dim < n:
            raise InvalidParameter(f"orthogonal bank needs 1 <= n <= dim, got n={n}, dim={dim}")
        rng = np.random.default_rng(seed)
        q, _ = np.linalg.qr(rng.standard_normal((dim, n)))
        return cls(q.T.copy(), source=f"random-orthogonal({seed})")

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(BANK_MAGIC + struct.pack("<III", BANK_VERSION, self.n, self.dim))
            f.write(self.vectors.astype("<f4").tobytes())

    @classmethod
    def load(cls, path) -> "PrototypeBank":
        """Read a bank file, renormalizing rows and warning when any was off by more than 1%."""
        path = Path(path)
        data = path.read_bytes()
        if len(data) < 16 or data[:4] != BANK_MAGIC:
            raise ParseError(f"{path}: not a prototype bank file")
        version, n, dim = struct.unpack("<III", data[4:16])
        if version != BANK_VERSION:
            raise ParseError(f"{path}: bank version {version}, expected {BANK_VERSION}")
        if len(data) != 16 + 4 * n * dim:
            raise ParseError(f"{path}: expected {n}x{dim} floats")
        vecs = np.frombuffer(data, dtype="<f4", offset=16).reshape(n, dim).astype(np.float64)
        norms = np.linalg.norm(vecs, axis=1)
        if (norms == 0).any():
            raise ParseError(f"{path}: zero prototype row")
        if np.any(np.abs(norms - 1) > 0.01):
            warnings.warn(f"{path}: prototype norms deviate from 1 by up to "
                          f"{np.abs(norms - 1).max():.3f}; renormalizing", stacklevel=2)
        return cls(vecs, source=f"file:{path.name}")


@dataclass
class PAConfig:
    kappa: float = 0.07
    n: int = 6
    samples_per_image: int = 0  # 0 means every cell
    lam: float = 1.0

    def __post_init__(self):
        if not self.kappa > 0:
            raise InvalidParameter(f"kappa must be > 0, got {self.kappa}")
        if self.lam < 0:
            raise InvalidParameter(f"lambda must be >= 0, got {self.lam}")
        if self.n < 1:
            raise InvalidParameter(f"need at least one count class, got {self.n}")


def local_counts(gt_density, stride: int, n: int):
    """Class label per ``stride x stride`` cell: local mass rounded half-up, clipped to ``n - 1``."""
    d = torch.as_tensor(np.asarray(gt_density) if not torch.is_tensor(gt_density) else gt_density)
    H, W = d.shape[-2:]
    if H % stride or W % stride:
        raise InvalidInput(f"density {H}x{W} not divisible by stride {stride}")
    cells = F.avg_pool2d(d.reshape(-1, 1, H, W).double(), stride) * stride**2
    labels = torch.floor(cells + 0.5).clamp(0, n - 1).long()[:, 0]
    return labels.reshape(*d.shape[:-2], H // stride, W // stride)


class PrototypeProjection(nn.Module):
    """Bias-free linear map from thermal feature channels to prototype width."""

    def __init__(self, in_channels: int, dim: int):
        super().__init__()
        self.linear = nn.Linear(in_channels, dim, bias=False)

    def forward(self, cells):
        return self.linear(cells)


def _cells(features: torch.Tensor) -> torch.Tensor:
    if features.dim() == 3:
        features = features[None]
    B, C, h, w = features.shape
    return features.permute(0, 2, 3, 1).reshape(B, h * w, C)


def _sample(B: int, cells: int, k: int, rng) -> torch.Tensor:
    if not k or k >= cells:
        return torch.arange(cells).repeat(B, 1)
    if k < 0:
        raise InvalidParameter(f"samples_per_image must be >= 0, got {k}")
    return torch.stack([torch.randperm(cells, generator=rng)[:k] for _ in range(B)])


def pa_loss(features: torch.Tensor, labels: torch.Tensor, bank: PrototypeBank, cfg: PAConfig,
            rng: torch.Generator | None = None, projection: nn.Module | None = None) -> torch.Tensor:
    """Prototype alignment loss averaged over the sampled cells.

    Args:
        features: ``(B, C, h, w)`` thermal features ``F_T``.
        labels: ``(B, h, w)`` integer count classes.
        projection: maps ``C`` to ``bank.dim``; ``None`` requires ``C == bank.dim``.
    """
    if cfg.n != bank.n:
        raise InvalidConfiguration(f"PA config has n={cfg.n} classes but the bank holds {bank.n}")
    x = _cells(features)
    y = labels.reshape(x.shape[0], -1)
    if y.shape[1] != x.shape[1]:
        raise InvalidInput(f"labels {tuple(labels.shape)} do not align with features {tuple(features.shape)}")
    if int(y.max()) >= bank.n or int(y.min()) < 0:
        raise InvalidConfiguration(f"label {int(y.max())} outside a bank of {bank.n} prototypes")
    idx = _sample(x.shape[0], x.shape[1], cfg.samples_per_image, rng)
    x = torch.gather(x, 1, idx[..., None].expand(-1, -1, x.shape[2]))
    y = torch.gather(y, 1, idx)
    if projection is not None:
        x = projection(x)
    elif x.shape[-1] != bank.dim:
        raise InvalidConfiguration(f"feature width {x.shape[-1]} != bank dim {bank.dim} and no projection given")
    x = F.normalize(x, dim=-1, eps=1e-12)
    logits = x @ bank.tensor(x.dtype).T / cfg.kappa
    return F.cross_entropy(logits.reshape(-1, bank.n), y.reshape(-1))


def ce_loss_variant(features: torch.Tensor, labels: torch.Tensor, classifier: nn.Module) -> torch.Tensor:
    """Plain per-cell cross entropy through a learned linear classifier."""
    x = _cells(features)
    logits = classifier(x)
    y = labels.reshape(x.shape[0], -1)
    if int(y.max()) >= logits.shape[-1]:
        raise InvalidConfiguration(f"label {int(y.max())} outside {logits.shape[-1]} classifier outputs")
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), y.reshape(-1))


def reg_loss(pred: torch.Tensor, gt: torch.Tensor, count_weight: float = 1.0) -> torch.Tensor:
    """Pixel MSE plus ``count_weight * |sum(pred) - sum(gt)|`` averaged over images."""
    if pred.shape != gt.shape:
        raise InvalidInput(f"prediction {tuple(pred.shape)} and target {tuple(gt.shape)} differ")
    batched = pred.dim() > 2
    p = pred.reshape(pred.shape[0], -1) if batched else pred.reshape(1, -1)
    g = gt.reshape(p.shape)
    return ((p - g) ** 2).mean() + count_weight * (p.sum(1) - g.sum(1)).abs().mean()


def total_loss(reg, pa, lam: float = 1.0):
    return reg + lam * pa
