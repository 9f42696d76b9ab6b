"""Deterministic procedural test images with endoscopy-like structure.

Used by the desk presets, smoke runs and tests so that nothing depends on a
downloaded corpus: reddish smooth shading, branching dark vessels, a few
specular highlights and mild fine texture.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .imagecore import write_png


def tissue_image(height: int, width: int | None = None, seed: int = 0) -> np.ndarray:
    width = height if width is None else width
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width] / max(height, width)

    base = np.zeros((height, width))
    for _ in range(4):
        fy, fx = rng.uniform(0.5, 2.5, size=2)
        py, px = rng.uniform(0, 2 * np.pi, size=2)
        base += np.sin(2 * np.pi * fy * yy + py) * np.cos(2 * np.pi * fx * xx + px)
    base = 0.5 + 0.12 * base / 4.0

    vessels = np.zeros_like(base)
    for _ in range(6):
        a, b, c = rng.uniform(-1.5, 1.5, size=3)
        f, ph = rng.uniform(2.0, 7.0), rng.uniform(0, 2 * np.pi)
        width_px = rng.uniform(0.004, 0.012)
        curve = a * xx + b * yy + 0.08 * np.sin(2 * np.pi * f * (xx * b - yy * a) + ph) + c * 0.3
        vessels += np.exp(-(curve**2) / (2 * width_px**2))
    vessels = np.clip(vessels, 0.0, 1.0)

    spots = np.zeros_like(base)
    for _ in range(3):
        cy, cx = rng.uniform(0.1, 0.9, size=2)
        r = rng.uniform(0.01, 0.03)
        spots += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
    spots = np.clip(spots, 0.0, 1.0)

    grain = rng.normal(0.0, 1.0, size=(height // 4 + 1, width // 4 + 1))
    grain = np.kron(grain, np.ones((4, 4)))[:height, :width] * 0.015

    r = base * 1.35 + grain - 0.35 * vessels
    g = base * 0.62 + grain - 0.22 * vessels
    b = base * 0.45 + grain - 0.15 * vessels
    img = np.stack([r, g, b], axis=2)
    img = img * (1.0 - spots[:, :, None]) + spots[:, :, None]
    return np.clip(img, 0.0, 1.0)


def write_dataset(root, classes=("esophagitis", "polyps", "normal-z-line"), per_class: int = 4,
                  size: tuple[int, int] = (256, 256), seed: int = 0) -> list[Path]:
    """Class-per-folder PNG tree of procedural images; ``size`` is (height, width)."""
    root = Path(root)
    paths = []
    for ci, label in enumerate(classes):
        for k in range(per_class):
            p = root / label / f"{label}_{k:03d}.png"
            write_png(p, tissue_image(size[0], size[1], seed=seed * 100_003 + ci * 1_009 + k))
            paths.append(p)
    return paths
