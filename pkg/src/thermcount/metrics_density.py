"""Ground-truth density maps from point annotations, and counting metrics.

A density map is a plain ``(H, W)`` float array of nonnegative values whose
sum is a person count. Annotations are :class:`PointSet` objects holding
``(x, y)`` pixel coordinates; pixel ``(row, col)`` covers the square
``[col, col + 1) x [row, row + 1)`` so its center sits at ``(col + .5, row + .5)``.
"""
from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InvalidInput, InvalidParameter, ParseError

TRUNCATE = 4.0  # kernel window half-width, in units of sigma


@dataclass(frozen=True)
class PointSet:
    """Ordered head annotations of one image.

    Args:
        points: ``(N, 2)`` array of ``(x, y)`` float pixel coordinates.
        image_size: ``(H, W)`` of the annotated image.
    """

    points: np.ndarray
    image_size: tuple[int, int]

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        h, w = (int(v) for v in self.image_size)
        if h <= 0 or w <= 0:
            raise InvalidInput(f"image_size must be positive, got {self.image_size}")
        if not np.all(np.isfinite(pts)):
            raise InvalidInput("point coordinates must be finite")
        bad = (pts[:, 0] < 0) | (pts[:, 0] >= w) | (pts[:, 1] < 0) | (pts[:, 1] >= h)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise InvalidInput(f"point {i} at {tuple(pts[i])} lies outside a {h}x{w} image")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "image_size", (h, w))

    def count(self) -> int:
        return len(self.points)

    def __len__(self):
        return len(self.points)

    def __eq__(self, other):
        if not isinstance(other, PointSet):
            return NotImplemented
        return self.image_size == other.image_size and np.array_equal(self.points, other.points)

    def cells(self) -> np.ndarray:
        """``(N, 2)`` integer ``(row, col)`` of the pixel containing each point."""
        return np.floor(self.points[:, ::-1]).astype(np.int64)


@dataclass(frozen=True)
class GridPartition:
    """The ``4**level`` boxes ``(row0, row1, col0, col1)`` (half-open) of a GAME grid."""

    level: int
    shape: tuple[int, int]
    regions: list[tuple[int, int, int, int]] = field(repr=False)
    row_edges: tuple[tuple[int, ...], ...] = field(repr=False, default=())
    col_edges: tuple[tuple[int, ...], ...] = field(repr=False, default=())


def check_density(values, name="density") -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise InvalidInput(f"{name} must be a 2-D grid, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInput(f"{name} contains non-finite values")
    if (arr < 0).any():
        raise InvalidInput(f"{name} has negative entries (min {arr.min():.3g})")
    return arr


def gaussian_patch(x: float, y: float, sigma: float, image_size: tuple[int, int]):
    """Unnormalized truncated Gaussian footprint of one point.

    Returns ``(rows, cols, patch)`` where ``patch`` holds the continuous
    Gaussian density sampled at the centers of the in-image pixels lying
    within ``TRUNCATE * sigma`` of the point along each axis.
    """
    h, w = image_size
    r = TRUNCATE * sigma
    c0, c1 = max(0, int(np.ceil(x - r - 0.5))), min(w, int(np.floor(x + r - 0.5)) + 1)
    r0, r1 = max(0, int(np.ceil(y - r - 0.5))), min(h, int(np.floor(y + r - 0.5)) + 1)
    dx = np.arange(c0, c1) + 0.5 - x
    dy = np.arange(r0, r1) + 0.5 - y
    gx = np.exp(-0.5 * (dx / sigma) ** 2)
    gy = np.exp(-0.5 * (dy / sigma) ** 2)
    patch = np.outer(gy, gx) / (2.0 * np.pi * sigma**2)
    return slice(r0, r1), slice(c0, c1), patch


def rasterize_density(points: PointSet, sigma: float = 4.0) -> np.ndarray:
    """Place one unit-mass truncated Gaussian per annotated point.

    Each footprint is renormalized after clipping to the image, so a point on
    the border still contributes exactly 1 to the total mass.
    """
    if not sigma > 0:
        raise InvalidParameter(f"sigma must be > 0, got {sigma}")
    h, w = points.image_size
    out = np.zeros((h, w), dtype=np.float64)
    for x, y in points.points:
        rows, cols, patch = gaussian_patch(x, y, sigma, (h, w))
        total = patch.sum()
        if total > 0:
            out[rows, cols] += patch / total
        else:  # sigma so small that no pixel center is in the window
            out[int(y), int(x)] += 1.0
    return out


def _split(lo: int, hi: int) -> int:
    return lo + (hi - lo + 1) // 2


@lru_cache(maxsize=256)
def partition_regions(H: int, W: int, L: int) -> GridPartition:
    """Recursive quadtree split of an ``H x W`` image into ``4**L`` boxes.

    When a side has odd length the first half gets the extra row/column.
    Regions are listed row-major over the final ``2**L x 2**L`` grid.
    """
    if L < 0:
        raise InvalidParameter(f"level must be >= 0, got {L}")
    if H < 2**L or W < 2**L:
        raise InvalidParameter(f"level {L} needs at least {2**L}x{2**L} pixels, image is {H}x{W}")

    def edges(n):
        segs = [(0, n)]
        for _ in range(L):
            segs = [half for lo, hi in segs for half in ((lo, _split(lo, hi)), (_split(lo, hi), hi))]
        return tuple(segs)

    rows, cols = edges(H), edges(W)
    regions = [(r0, r1, c0, c1) for r0, r1 in rows for c0, c1 in cols]
    return GridPartition(L, (H, W), regions, rows, cols)


def region_sums(grid: np.ndarray, L: int) -> np.ndarray:
    """Sum of ``grid`` inside every GAME region, as a ``(2**L, 2**L)`` array."""
    part = partition_regions(*grid.shape, L)
    r_starts = [r0 for r0, _ in part.row_edges]
    c_starts = [c0 for c0, _ in part.col_edges]
    return np.add.reduceat(np.add.reduceat(grid, r_starts, axis=0), c_starts, axis=1)


def region_counts(points: PointSet, L: int) -> np.ndarray:
    """Number of points whose pixel falls inside every GAME region."""
    h, w = points.image_size
    part = partition_regions(h, w, L)
    n = 2**L
    out = np.zeros((n, n), dtype=np.float64)
    if len(points):
        cells = points.cells()
        r_starts = np.array([r0 for r0, _ in part.row_edges])
        c_starts = np.array([c0 for c0, _ in part.col_edges])
        ri = np.searchsorted(r_starts, cells[:, 0], side="right") - 1
        ci = np.searchsorted(c_starts, cells[:, 1], side="right") - 1
        np.add.at(out, (ri, ci), 1.0)
    return out


def game(pred: np.ndarray, gt: PointSet, L: int) -> float:
    """Single-image GAME(L): summed absolute count error over the ``4**L`` regions.

    The value is the exact region error sum rounded once to float64. Each
    region's error sign comes from a correctly rounded sum, after which the
    whole signed sum is formed in one ``math.fsum``. Since GAME(L+1) >= GAME(L)
    holds for the exact values and rounding is monotone, it also holds for the
    returned floats, with no tolerance needed.
    """
    pred = check_density(pred, "pred")
    if pred.shape != gt.image_size:
        raise InvalidInput(f"prediction shape {pred.shape} does not match annotation size {gt.image_size}")
    part = partition_regions(*pred.shape, L)
    counts = region_counts(gt, L)
    n = 2**L
    signs = np.empty((n, n))
    for k, (r0, r1, c0, c1) in enumerate(part.regions):
        i, j = divmod(k, n)
        err = math.fsum([*pred[r0:r1, c0:c1].ravel().tolist(), -counts[i, j]])
        signs[i, j] = 1.0 if err >= 0 else -1.0
    rsizes = [r1 - r0 for r0, r1 in part.row_edges]
    csizes = [c1 - c0 for c0, c1 in part.col_edges]
    sign_grid = np.repeat(np.repeat(signs, rsizes, axis=0), csizes, axis=1)
    return math.fsum([*(pred * sign_grid).ravel().tolist(), *(-signs * counts).ravel().tolist()])


def count_error(pred: np.ndarray, gt: PointSet) -> float:
    """Predicted minus true count, as the exact difference rounded once."""
    return math.fsum([*check_density(pred, "pred").ravel().tolist(), -float(gt.count())])


def dataset_game(preds: Sequence[np.ndarray], gts: Sequence[PointSet], L: int) -> float:
    """GAME(L) over a dataset: per-image region error sums, averaged over images."""
    if len(preds) != len(gts) or not len(preds):
        raise InvalidInput("need equally many predictions and annotations, at least one")
    return float(np.mean([game(p, g, L) for p, g in zip(preds, gts)]))


def _paired(pred_counts, gt_counts):
    p = np.asarray(pred_counts, dtype=np.float64).ravel()
    g = np.asarray(gt_counts, dtype=np.float64).ravel()
    if p.size == 0 or p.size != g.size:
        raise InvalidInput(f"count lists must be nonempty and equally long, got {p.size} and {g.size}")
    return p, g


def mae(pred_counts, gt_counts) -> float:
    p, g = _paired(pred_counts, gt_counts)
    return float(np.mean(np.abs(p - g)))


def rmse(pred_counts, gt_counts) -> float:
    p, g = _paired(pred_counts, gt_counts)
    return float(np.sqrt(np.mean((p - g) ** 2)))


def evaluate_counts(preds: Sequence[np.ndarray], gts: Sequence[PointSet], levels=(0, 1, 2, 3)) -> dict:
    """GAME at every level plus MAE and RMSE of total counts."""
    out = {f"game{L}": dataset_game(preds, gts, L) for L in levels}
    # errors rounded once, so MAE is bit-identical to GAME(0)
    errors = [count_error(p, g) for p, g in zip(preds, gts)]
    zeros = [0.0] * len(errors)
    out["mae"] = mae(errors, zeros)
    out["rmse"] = rmse(errors, zeros)
    return out


# --- file formats -----------------------------------------------------------

def write_points_csv(points: PointSet, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["x", "y"])
        for x, y in points.points:
            writer.writerow([repr(float(x)), repr(float(y))])


def read_points_csv(path, image_size: tuple[int, int]) -> PointSet:
    path = Path(path)
    try:
        with open(path, newline="", encoding="utf-8") as f:
            rows = list(csv.reader(f))
    except OSError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    if not rows or [c.strip() for c in rows[0]] != ["x", "y"]:
        raise ParseError(f"{path}: expected header 'x,y'")
    try:
        pts = [(float(x), float(y)) for x, y in rows[1:]]
    except ValueError as exc:
        raise ParseError(f"{path}: malformed row ({exc})") from exc
    try:
        return PointSet(np.array(pts, dtype=np.float64).reshape(-1, 2), image_size)
    except InvalidInput as exc:
        raise ParseError(f"{path}: {exc}") from exc


def write_density(values: np.ndarray, path) -> None:
    """Little-endian ``uint32 H, uint32 W`` header followed by row-major float32."""
    arr = check_density(values)
    with open(path, "wb") as f:
        f.write(struct.pack("<II", *arr.shape))
        f.write(arr.astype("<f4").tobytes())


def read_density(path) -> np.ndarray:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 8:
        raise ParseError(f"{path}: truncated header")
    h, w = struct.unpack("<II", data[:8])
    if len(data) != 8 + 4 * h * w:
        raise ParseError(f"{path}: expected {4 * h * w} payload bytes for {h}x{w}, found {len(data) - 8}")
    return np.frombuffer(data, dtype="<f4", offset=8).reshape(h, w).astype(np.float64)
