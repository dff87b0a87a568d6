"""Synthetic multiband scenes with blocky ground truth.

Used by the bundled smoke fixtures and the desk-scale benchmarks: each class
gets a distinct mean spectrum, regions are axis-aligned blocks large enough
for over-segmentation to recover them, and per-pixel Gaussian noise controls
how hard the pixel-level task is.
"""

from __future__ import annotations

import numpy as np

from .errors import UsageError
from .raster import IGNORE_LABEL, ClassEntry, ClassScheme, Patch


def class_spectra(n_classes: int, c_bands: int, gap: float = 1.0) -> np.ndarray:
    """Well-separated mean spectra, one row per class."""
    mu = np.zeros((n_classes, c_bands), dtype=np.float32)
    for c in range(n_classes):
        mu[c, c % c_bands] = gap
        mu[c, (c + 1) % c_bands] = 0.5 * gap * ((c // c_bands) + 1)
    return mu


def small_scheme(n_classes: int = 3) -> ClassScheme:
    base = [("meadow", (80, 200, 120)), ("forest", (20, 90, 40)),
            ("water", (70, 110, 170)), ("rock", (150, 150, 150)),
            ("sand", (220, 200, 140)), ("ice", (240, 245, 255))]
    if n_classes > len(base):
        raise UsageError(f"synthetic scheme supports up to {len(base)} classes")
    return ClassScheme([ClassEntry(i, n, c) for i, (n, c) in
                        enumerate(base[:n_classes])])


def make_scene(h: int = 128, w: int = 128, n_classes: int = 3,
               c_bands: int = 4, block: int = 16, noise: float = 0.1,
               seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Blocky class layout -> (bands [C,H,W] f32, labels [H,W] u8)."""
    if h % block or w % block:
        raise UsageError(f"scene {h}x{w} not divisible by block {block}")
    rng = np.random.default_rng(seed)
    grid = rng.integers(0, n_classes, size=(h // block, w // block))
    labels = np.repeat(np.repeat(grid, block, axis=0), block, axis=1)
    mu = class_spectra(n_classes, c_bands)
    bands = mu[labels].transpose(2, 0, 1).astype(np.float32)
    bands += rng.normal(scale=noise, size=bands.shape).astype(np.float32)
    return bands, labels.astype(np.uint8)


def make_patches(n_patches: int = 8, h: int = 32, w: int = 32,
                 n_classes: int = 3, c_bands: int = 4, noise: float = 0.1,
                 seed: int = 0, split_col: int | None = None) -> list[Patch]:
    """Two-region patches: a dominant class left of split_col, another right.

    Every class appears as a dominant class across the set, so per-class
    metrics have support.
    """
    rng = np.random.default_rng(seed)
    mu = class_spectra(n_classes, c_bands)
    if split_col is None:
        split_col = (3 * w) // 4
    patches = []
    for i in range(n_patches):
        main = i % n_classes
        other = (i + 1) % n_classes
        labels = np.full((h, w), main, dtype=np.uint8)
        labels[:, split_col:] = other
        bands = mu[labels].transpose(2, 0, 1).astype(np.float32)
        bands += rng.normal(scale=noise, size=bands.shape).astype(np.float32)
        patches.append(Patch(bands=bands, labels=labels,
                             valid_mask=np.ones((h, w), dtype=bool),
                             patch_id=f"s{i:03d}", dominant_class=main))
    return patches
