"""From point annotations to density maps, and how GAME scores a prediction.

Run: python3 demos/01_density_and_game.py --out demo_out
"""
import argparse
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from thermcount.metrics_density import PointSet, game, rasterize_density, region_sums


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", type=Path, default=Path("demo_out"))
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)

    # Twelve people on a 64x64 image, two of them right on the border.
    rng = np.random.default_rng(3)
    xy = np.column_stack([rng.uniform(4, 60, 12), rng.uniform(4, 60, 12)])
    xy[0] = (0.0, 30.0)
    xy[1] = (63.5, 63.5)
    gt = PointSet(xy, (64, 64))

    # Each Gaussian is truncated and renormalised inside the image, so even the
    # border points contribute exactly one person of mass.
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.6))
    for ax, sigma in zip(axes, (2.0, 4.0, 8.0)):
        d = rasterize_density(gt, sigma)
        ax.imshow(d, cmap="inferno")
        ax.scatter(xy[:, 0] - 0.5, xy[:, 1] - 0.5, s=6, c="cyan")
        ax.set_title(f"sigma={sigma:g}  mass={d.sum():.6f}")
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(args.out / "density_sigma.png", dpi=120)
    print(f"{gt.count()} people; masses printed in {args.out / 'density_sigma.png'}")

    # A prediction with the right total but the wrong layout: GAME(0) forgives
    # it, finer levels do not.
    uniform = np.full((64, 64), gt.count() / 64**2)
    exact = rasterize_density(gt, 4.0)
    print("level  GAME(uniform)  GAME(exact)")
    for L in range(4):
        print(f"{L:5d}  {game(uniform, gt, L):13.3f}  {game(exact, gt, L):11.3f}")
    print("per-quadrant sums of the exact map:\n", np.round(region_sums(exact, 1), 3))


if __name__ == "__main__":
    main()
