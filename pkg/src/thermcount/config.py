"""Experiment configuration and its flat ``section.key = value`` text format."""
from __future__ import annotations

import dataclasses
import hashlib
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .counting_net import ModelConfig
from .errors import InvalidConfiguration
from .objectives import PAConfig
from .scenes import SceneGenConfig


@dataclass
class DataConfig:
    root: str = "data"
    n_train: int = 200
    n_test: int = 50


@dataclass
class ExtractorConfig:
    T: int = 1000
    schedule: str = "cosine"
    latent_seed: int = 0
    latent_channels: int = 4
    feature_channels: int = 16
    pretrain_steps: int = 2000
    pretrain_batch: int = 8
    pretrain_lr: float = 2e-3
    cond_dropout: float = 0.5
    huber_c: float = 0.0
    checkpoint: str = ""
    mode: str = "frozen"  # frozen | joint
    latent_mode: str = "fixed"  # fixed | resampled


@dataclass
class ObjectiveConfig:
    aux: str = "pa"  # pa | ce | none
    kappa: float = 0.07
    n: int = 6
    samples_per_image: int = 0
    lam: float = 1.0
    count_weight: float = 1.0
    density_sigma: float = 4.0
    density_scale: float = 100.0  # targets are counts * scale; predictions divided back at readout
    bank_path: str = ""
    bank_seed: int = 0

    def pa(self) -> PAConfig:
        return PAConfig(self.kappa, self.n, self.samples_per_image, self.lam)


@dataclass
class OptimConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    epochs: int = 60
    batch_size: int = 8
    seed: int = 0
    eval_every: int = 5
    lr_schedule: str = "cosine"  # cosine | constant


@dataclass
class RunConfig:
    out: str = "runs/default"


@dataclass
class ExperimentConfig:
    scene: SceneGenConfig = field(default_factory=SceneGenConfig)
    data: DataConfig = field(default_factory=DataConfig)
    extractor: ExtractorConfig = field(default_factory=ExtractorConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def validate(self) -> "ExperimentConfig":
        if self.extractor.mode not in ("frozen", "joint"):
            raise InvalidConfiguration(f"extractor.mode must be frozen|joint, got {self.extractor.mode!r}")
        if self.extractor.latent_mode not in ("fixed", "resampled"):
            raise InvalidConfiguration(f"extractor.latent_mode must be fixed|resampled, got {self.extractor.latent_mode!r}")
        if self.optim.lr_schedule not in ("cosine", "constant"):
            raise InvalidConfiguration(f"optim.lr_schedule must be cosine|constant, got {self.optim.lr_schedule!r}")
        if self.objective.aux not in ("pa", "ce", "none"):
            raise InvalidConfiguration(f"objective.aux must be pa|ce|none, got {self.objective.aux!r}")
        if self.data.n_train < 0 or self.data.n_test < 0:
            raise InvalidConfiguration("data.n_train and data.n_test must be >= 0")
        if self.optim.epochs < 0 or self.optim.batch_size < 1 or self.optim.eval_every < 1:
            raise InvalidConfiguration("optim.epochs >= 0, optim.batch_size >= 1 and optim.eval_every >= 1 required")
        if self.scene.H % 4 or self.scene.W % 4:
            raise InvalidConfiguration("scene size must be divisible by 4")
        try:
            self.objective.pa()
        except ValueError as exc:
            raise InvalidConfiguration(str(exc)) from exc
        return self


SECTIONS = [f.name for f in dataclasses.fields(ExperimentConfig)]


def paper_scale_config() -> ExperimentConfig:
    """Full-scale training hyperparameters; needs real data and far more compute than the toy defaults."""
    cfg = ExperimentConfig()
    cfg.scene = dataclasses.replace(cfg.scene, H=384, W=384)
    cfg.extractor.pretrain_steps = 20000
    cfg.optim = OptimConfig(lr=1e-4, weight_decay=1e-4, epochs=500, batch_size=1)
    cfg.objective.lam = 1.0
    cfg.objective.n = 6
    return cfg


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(raw: str, annotation, key: str):
    origin = typing.get_origin(annotation)
    try:
        if origin is tuple:
            args = typing.get_args(annotation)
            parts = [p.strip() for p in raw.split(",")]
            if len(parts) != len(args):
                raise ValueError(f"expected {len(args)} comma-separated values")
            return tuple(_coerce(p, a, key) for p, a in zip(parts, args))
        if annotation is bool:
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError("expected true/false")
            return raw.lower() in ("true", "1", "yes")
        if annotation is int:
            return int(raw)
        if annotation is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise InvalidConfiguration(f"{key}: cannot parse {raw!r} ({exc})") from exc


def _hints(cls):
    return typing.get_type_hints(cls)


def render_config(cfg: ExperimentConfig) -> str:
    lines = []
    for sec in SECTIONS:
        obj = getattr(cfg, sec)
        for f in dataclasses.fields(obj):
            lines.append(f"{sec}.{f.name} = {_format(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def apply_overrides(cfg: ExperimentConfig, items: dict[str, str]) -> ExperimentConfig:
    """Return a copy of ``cfg`` with dotted keys replaced; unknown keys are an error."""
    grouped: dict[str, dict] = {}
    for key, raw in items.items():
        sec, _, name = key.strip().partition(".")
        if sec not in SECTIONS or not name:
            raise InvalidConfiguration(f"unknown config key {key!r}")
        hints = _hints(type(getattr(cfg, sec)))
        if name not in hints or name not in {f.name for f in dataclasses.fields(getattr(cfg, sec))}:
            raise InvalidConfiguration(f"unknown config key {key!r}")
        grouped.setdefault(sec, {})[name] = _coerce(raw.strip(), hints[name], key)
    kwargs = {}
    for sec in SECTIONS:
        obj = getattr(cfg, sec)
        try:
            kwargs[sec] = dataclasses.replace(obj, **grouped.get(sec, {}))
        except ValueError as exc:
            raise InvalidConfiguration(f"{sec}: {exc}") from exc
    return ExperimentConfig(**kwargs).validate()


def parse_config(text: str, base: ExperimentConfig | None = None, source: str = "<config>") -> ExperimentConfig:
    items = {}
    for n, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise InvalidConfiguration(f"{source}:{n}: expected 'key = value'")
        k, v = stripped.split("=", 1)
        if k.strip() in items:
            raise InvalidConfiguration(f"{source}:{n}: duplicate key {k.strip()!r}")
        items[k.strip()] = v.strip()
    return apply_overrides(base or ExperimentConfig(), items)


def load_config(path, base: ExperimentConfig | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise InvalidConfiguration(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, base, str(path))


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(render_config(cfg), encoding="utf-8")


def config_hash(cfg: ExperimentConfig, sections=None) -> str:
    """Short digest of the rendered config; the ``run`` section (output location) is excluded by default."""
    if sections is None:
        sections = [s for s in SECTIONS if s != "run"]
    text = "".join(l + "\n" for l in render_config(cfg).splitlines() if l.split(".", 1)[0] in sections)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]
