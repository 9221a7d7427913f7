"""Synthetic thermal/depth crowd scenes and their on-disk format.

Every scene is a pure function of ``(config, index)``. People show up as warm
round blobs in the thermal image *and* as near-depth bumps in the depth map.
Distractors (lamps, vents, engines) are warm elongated blobs that leave the
depth map untouched, so thermal intensity alone is ambiguous while depth is
not. The estimated depth map is the true one pushed through a dataset-wide
affine bias and smooth warp, mimicking a depth network run off-domain.
"""
from __future__ import annotations

import dataclasses
import hashlib
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidInput, InvalidParameter, MissingArtifact, ParseError
from .metrics_density import PointSet, read_points_csv, write_points_csv

MANIFEST_NAME = "manifest.txt"
MANIFEST_MAGIC = "#thermcount-manifest 1"


@dataclass(frozen=True)
class SceneGenConfig:
    H: int = 64
    W: int = 64
    count_range: tuple[int, int] = (4, 24)
    person_intensity: float = 0.8
    distractor_rate: float = 6.0
    ambient_noise_std: float = 0.03
    perspective_strength: float = 0.6
    base_radius: float = 2.2
    distractor_elongation: tuple[float, float] = (1.2, 2.2)  # major/minor axis ratio range
    seed: int = 0
    # dataset-global depth estimation bias
    depth_bias_gain: float = 0.75
    depth_bias_offset: float = 0.12
    depth_warp_amp: float = 1.5
    depth_bias_seed: int = 7

    def __post_init__(self):
        lo, hi = self.count_range
        if not 0 <= lo <= hi:
            raise InvalidParameter(f"count_range must satisfy 0 <= min <= max, got {self.count_range}")
        if self.H < 32 or self.W < 32:
            raise InvalidParameter(f"scenes must be at least 32x32, got {self.H}x{self.W}")
        if not 0 < self.person_intensity <= 1:
            raise InvalidParameter("person_intensity must lie in (0, 1]")
        if not 0 <= self.perspective_strength <= 1:
            raise InvalidParameter("perspective_strength must lie in [0, 1]")
        floats = [self.person_intensity, self.distractor_rate, self.ambient_noise_std,
                  self.perspective_strength, self.base_radius, self.depth_bias_gain,
                  self.depth_bias_offset, self.depth_warp_amp]
        if not all(np.isfinite(floats)):
            raise InvalidParameter("scene config contains non-finite values")
        e_lo, e_hi = self.distractor_elongation
        if not 1.0 < e_lo <= e_hi:
            raise InvalidParameter(f"distractor_elongation must satisfy 1 < min <= max, got {self.distractor_elongation}")
        if self.distractor_rate < 0 or self.ambient_noise_std < 0 or self.base_radius <= 0:
            raise InvalidParameter("distractor_rate and ambient_noise_std must be >= 0, base_radius > 0")


@dataclass(eq=False)
class Scene:
    """One synthetic frame. All grids are ``(H, W)`` float64 in ``[0, 1]``."""

    thermal: np.ndarray
    depth_gt: np.ndarray
    depth_est: np.ndarray
    points: PointSet
    seed: int
    index: int = 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.thermal.shape

    @property
    def scene_id(self) -> str:
        return f"scene_{self.index:05d}"


@dataclass
class Layout:
    """Object placement behind a scene, kept for diagnostics and tests."""

    persons: np.ndarray  # (N, 2) x, y
    person_radius: np.ndarray
    person_heat: np.ndarray
    distractors: np.ndarray  # (K, 2) x, y
    distractor_axes: np.ndarray  # (K, 2) semi-axes
    distractor_angle: np.ndarray
    distractor_heat: np.ndarray
    noise: np.ndarray = field(repr=False)


def scene_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), int(index)]))


def ambient_pattern(H: int, W: int) -> np.ndarray:
    """Deterministic background heat: cool sky at the top, warm ground below."""
    rows = np.linspace(0.0, 1.0, H)[:, None]
    cols = np.linspace(0.0, 1.0, W)[None, :]
    return 0.12 + 0.1 * rows + 0.03 * np.sin(2 * np.pi * cols) * rows


def background_depth(H: int, W: int, perspective_strength: float) -> np.ndarray:
    """Ground-plane depth rising from far (top) to near (bottom)."""
    rows = np.linspace(0.0, 1.0, H)[:, None]
    return np.broadcast_to(0.35 + perspective_strength * 0.45 * (rows - 0.3), (H, W)).copy()


def _soft_disk(dist: np.ndarray, radius, edge: float = 0.75) -> np.ndarray:
    return np.clip((radius + edge - dist) / (2 * edge), 0.0, 1.0)


def sample_layout(config: SceneGenConfig, index: int) -> Layout:
    rng = scene_rng(config.seed, index)
    H, W = config.H, config.W
    lo, hi = config.count_range
    n = int(rng.integers(lo, hi + 1))
    persons = np.column_stack([rng.uniform(0, W, n), rng.uniform(0, H, n)])
    bg = background_depth(H, W, config.perspective_strength)
    d = bg[np.minimum(persons[:, 1].astype(int), H - 1), 0] if n else np.zeros(0)
    radius = config.base_radius * (0.5 + d)
    heat = config.person_intensity * rng.uniform(0.85, 1.0, n)

    k = int(rng.poisson(config.distractor_rate))
    distractors = np.column_stack([rng.uniform(0, W, k), rng.uniform(0, H, k)])
    minor = config.base_radius * rng.uniform(0.6, 1.1, k)
    axes = np.column_stack([minor * rng.uniform(*config.distractor_elongation, k), minor])
    angle = rng.uniform(0, np.pi, k)
    dheat = config.person_intensity * rng.uniform(0.85, 1.0, k)
    noise = rng.standard_normal((H, W)) * config.ambient_noise_std
    return Layout(persons, radius, heat, distractors, axes, angle, dheat, noise)


def render_scene(config: SceneGenConfig, layout: Layout, index: int = 0) -> Scene:
    H, W = config.H, config.W
    rr, cc = np.mgrid[0:H, 0:W] + 0.5
    thermal = ambient_pattern(H, W)
    depth = background_depth(H, W, config.perspective_strength)
    silhouette = np.zeros((H, W))
    for (x, y), r, q in zip(layout.persons, layout.person_radius, layout.person_heat):
        blob = _soft_disk(np.hypot(cc - x, rr - y), r)
        thermal = np.maximum(thermal, q * blob)
        # standing person: a nearer silhouette extending above the head point
        body = _soft_disk(np.hypot((cc - x) * 1.2, np.maximum(rr - y, (y - rr) * 0.5)), r * 1.1)
        silhouette = np.maximum(silhouette, body)
    for (x, y), (a, b), th, q in zip(layout.distractors, layout.distractor_axes,
                                     layout.distractor_angle, layout.distractor_heat):
        u = (cc - x) * np.cos(th) + (rr - y) * np.sin(th)
        v = -(cc - x) * np.sin(th) + (rr - y) * np.cos(th)
        dist = np.hypot(u / a, v / b) * b
        thermal = np.maximum(thermal, q * _soft_disk(dist, b))
    thermal = np.clip(thermal + layout.noise, 0.0, 1.0)
    depth = np.clip(depth + 0.3 * silhouette, 0.0, 1.0)
    depth_est = degrade_depth(depth, config.depth_bias_gain, config.depth_bias_offset,
                              config.depth_warp_amp, config.depth_bias_seed)
    return Scene(thermal, depth, depth_est, PointSet(layout.persons, (H, W)), int(config.seed), int(index))


def generate_scene(config: SceneGenConfig, index: int) -> Scene:
    """Deterministically build scene number ``index`` of the dataset defined by ``config``."""
    return render_scene(config, sample_layout(config, index), index)


# --- depth degradation -------------------------------------------------------

def warp_field(shape: tuple[int, int], amp: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Smooth displacement field ``(dy, dx)`` whose magnitude peaks at exactly ``amp`` pixels."""
    H, W = shape
    if amp == 0:
        return np.zeros(shape), np.zeros(shape)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), 0x77A5]))
    rr, cc = np.mgrid[0:H, 0:W]
    comps = []
    for _ in range(2):
        f = rng.uniform(0.5, 1.5, (3, 2))
        phase = rng.uniform(0, 2 * np.pi, 3)
        comps.append(sum(np.sin(2 * np.pi * (f[i, 0] * rr / H + f[i, 1] * cc / W) + phase[i])
                         for i in range(3)))
    dy, dx = comps
    mag = np.hypot(dy, dx).max()
    return dy * (amp / mag), dx * (amp / mag)


def _bilinear(img: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    H, W = img.shape
    rows = np.clip(rows, 0, H - 1)
    cols = np.clip(cols, 0, W - 1)
    r0 = np.minimum(np.floor(rows).astype(int), H - 2) if H > 1 else np.zeros_like(rows, dtype=int)
    c0 = np.minimum(np.floor(cols).astype(int), W - 2) if W > 1 else np.zeros_like(cols, dtype=int)
    fr, fc = rows - r0, cols - c0
    r1, c1 = np.minimum(r0 + 1, H - 1), np.minimum(c0 + 1, W - 1)
    top = img[r0, c0] * (1 - fc) + img[r0, c1] * fc
    bot = img[r1, c0] * (1 - fc) + img[r1, c1] * fc
    return top * (1 - fr) + bot * fr


def degrade_depth(depth_gt: np.ndarray, bias_gain: float, bias_offset: float,
                  smooth_warp_amp: float, seed: int) -> np.ndarray:
    """Systematic depth-estimation error: ``clip(gain * warp(depth) + offset, 0, 1)``."""
    depth_gt = np.asarray(depth_gt, dtype=np.float64)
    if depth_gt.min() < 0 or depth_gt.max() > 1:
        raise InvalidInput("depth_gt must lie in [0, 1]")
    if smooth_warp_amp:
        dy, dx = warp_field(depth_gt.shape, smooth_warp_amp, seed)
        rr, cc = np.mgrid[0:depth_gt.shape[0], 0:depth_gt.shape[1]]
        warped = _bilinear(depth_gt, rr + dy, cc + dx)
    else:
        warped = depth_gt
    return np.clip(bias_gain * warped + bias_offset, 0.0, 1.0)


# --- pretraining target ------------------------------------------------------

def person_target(scene: Scene, factor: int = 4, radius: float = 2.5) -> np.ndarray:
    """Four-channel "appearance" rendering at ``1/factor`` resolution.

    This is the image the depth-conditioned denoiser learns to produce: people
    are visible, heat sources are not. Channels are scaled to roughly [-1, 1].
    """
    H, W = scene.shape
    if H % factor or W % factor:
        raise InvalidInput(f"scene {H}x{W} not divisible by {factor}")
    rr, cc = np.mgrid[0:H, 0:W] + 0.5
    occ = np.zeros((H, W))
    for x, y in scene.points.points:
        occ = np.maximum(occ, _soft_disk(np.hypot(cc - x, rr - y), radius))

    def pool(a):
        return a.reshape(H // factor, factor, W // factor, factor).mean(axis=(1, 3))

    o, d = pool(occ), pool(scene.depth_gt)
    chans = [0.7 * o + 0.3 * d, d, 0.4 * o + 0.6 * (1 - d), o]
    return np.stack([2 * c - 1 for c in chans])


# --- disk format ------------------------------------------------------------

def write_pgm16(path, img: np.ndarray) -> None:
    H, W = img.shape
    q = np.round(np.clip(img, 0, 1) * 65535).astype(">u2")
    with open(path, "wb") as f:
        f.write(f"P5\n{W} {H}\n65535\n".encode("ascii"))
        f.write(q.tobytes())


def read_pgm16(path) -> np.ndarray:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    # header tokens are separated by whitespace; exactly one whitespace byte follows maxval
    tokens = re.compile(rb"\s*(\S+)")
    pos, fields = 0, []
    try:
        for _ in range(4):
            m = tokens.match(data, pos)
            if m is None:
                raise ValueError("truncated header")
            fields.append(m.group(1))
            pos = m.end()
        if fields[0] != b"P5":
            raise ValueError("not a binary PGM")
        W, H, maxval = int(fields[1]), int(fields[2]), int(fields[3])
        if pos >= len(data) or not data[pos:pos + 1].isspace():
            raise ValueError("missing separator after maxval")
    except ValueError as exc:
        raise ParseError(f"{path}: bad PGM header ({exc})") from exc
    if maxval != 65535:
        raise ParseError(f"{path}: expected 16-bit PGM, maxval {maxval}")
    payload = data[pos + 1:]
    if len(payload) != 2 * H * W:
        raise ParseError(f"{path}: expected {2 * H * W} bytes of pixels, found {len(payload)}")
    return np.frombuffer(payload, dtype=">u2").reshape(H, W).astype(np.float64) / 65535.0


def save_scene(scene: Scene, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_pgm16(d / "thermal.pgm", scene.thermal)
    write_pgm16(d / "depth_gt.pgm", scene.depth_gt)
    write_pgm16(d / "depth_est.pgm", scene.depth_est)
    write_points_csv(scene.points, d / "points.csv")
    H, W = scene.shape
    meta = {"id": scene.scene_id, "index": scene.index, "seed": scene.seed, "H": H, "W": W,
            "count": scene.points.count()}
    (d / "meta").write_text("".join(f"{k}={v}\n" for k, v in meta.items()), encoding="utf-8")
    return d


def read_key_values(path) -> dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        if "=" not in line:
            raise ParseError(f"{path}:{n}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_scene(directory) -> Scene:
    d = Path(directory)
    if not d.is_dir():
        raise MissingArtifact(f"scene directory {d} does not exist")
    meta = read_key_values(d / "meta")
    try:
        H, W, seed, index = int(meta["H"]), int(meta["W"]), int(meta["seed"]), int(meta["index"])
    except (KeyError, ValueError) as exc:
        raise ParseError(f"{d / 'meta'}: missing or malformed field ({exc})") from exc
    grids = {}
    for name in ("thermal", "depth_gt", "depth_est"):
        g = read_pgm16(d / f"{name}.pgm")
        if g.shape != (H, W):
            raise ParseError(f"{d / (name + '.pgm')}: shape {g.shape} disagrees with meta {H}x{W}")
        grids[name] = g
    points = read_points_csv(d / "points.csv", (H, W))
    return Scene(grids["thermal"], grids["depth_gt"], grids["depth_est"], points, seed, index)


# --- datasets ----------------------------------------------------------------

@dataclass
class ManifestEntry:
    scene_id: str
    split: str
    count: int


@dataclass
class Manifest:
    root: Path
    config: SceneGenConfig
    entries: list[ManifestEntry]

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def load(self, split: str | None = None) -> list[Scene]:
        return [load_scene(self.root / e.scene_id)
                for e in self.entries if split is None or e.split == split]

    def digest(self) -> str:
        return hashlib.sha256((self.root / MANIFEST_NAME).read_bytes()).hexdigest()


def render_scene_config(config: SceneGenConfig) -> list[str]:
    lines = []
    for f in dataclasses.fields(config):
        v = getattr(config, f.name)
        v = ",".join(str(x) for x in v) if isinstance(v, tuple) else repr(v)
        lines.append(f"config.{f.name} = {v}")
    return lines


def parse_scene_config(items: dict[str, str]) -> SceneGenConfig:
    kwargs = {}
    for f in dataclasses.fields(SceneGenConfig):
        if f.name not in items:
            continue
        raw = items.pop(f.name)
        default = f.default
        if isinstance(default, tuple):
            kwargs[f.name] = tuple(type(d)(x) for d, x in zip(default, raw.split(",")))
        else:
            kwargs[f.name] = type(default)(raw)
    if items:
        raise InvalidParameter(f"unknown scene config keys: {sorted(items)}")
    return SceneGenConfig(**kwargs)


def generate_dataset(config: SceneGenConfig, n_scenes: int, out_dir, n_test: int = 0) -> Manifest:
    """Write ``n_scenes`` scenes plus ``manifest.txt``; the last ``n_test`` are tagged ``test``."""
    if n_scenes <= 0:
        raise InvalidInput("a dataset needs at least one scene")
    if not 0 <= n_test <= n_scenes:
        raise InvalidParameter(f"n_test={n_test} outside [0, {n_scenes}]")
    root = Path(out_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
        entries = []
        for i in range(n_scenes):
            scene = generate_scene(config, i)
            save_scene(scene, root / scene.scene_id)
            split = "test" if i >= n_scenes - n_test else "train"
            entries.append(ManifestEntry(scene.scene_id, split, scene.points.count()))
        lines = [MANIFEST_MAGIC, *render_scene_config(config)]
        lines += [f"{e.scene_id} {e.split} {e.count}" for e in entries]
        tmp = root / (MANIFEST_NAME + ".tmp")
        tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
        os.replace(tmp, root / MANIFEST_NAME)
    except OSError as exc:
        raise OSError(f"writing dataset under {root}: {exc}") from exc
    return Manifest(root, config, entries)


def load_manifest(root) -> Manifest:
    root = Path(root)
    path = root / MANIFEST_NAME
    if not path.is_file():
        raise MissingArtifact(f"no dataset manifest at {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != MANIFEST_MAGIC:
        raise ParseError(f"{path}: missing manifest header")
    cfg, entries = {}, []
    for n, line in enumerate(lines[1:], 2):
        if not line.strip():
            continue
        if line.startswith("config."):
            k, v = line[len("config."):].split("=", 1)
            cfg[k.strip()] = v.strip()
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ParseError(f"{path}:{n}: expected '<id> <split> <count>'")
        try:
            entries.append(ManifestEntry(parts[0], parts[1], int(parts[2])))
        except ValueError as exc:
            raise ParseError(f"{path}:{n}: {exc}") from exc
    try:
        config = parse_scene_config(cfg)
    except (ValueError, TypeError) as exc:
        raise ParseError(f"{path}: bad config block ({exc})") from exc
    return Manifest(root, config, entries)
