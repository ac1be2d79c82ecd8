"""Procedural texture corpus: gradients, checkerboards and soft blobs."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def synth_image(rng: np.random.Generator, extent: int) -> np.ndarray:
    """One ``extent x extent x 3`` uint8 image."""
    yy, xx = np.mgrid[0:extent, 0:extent].astype(np.float64) / extent
    theta = rng.uniform(0, 2 * np.pi)
    t = (np.cos(theta) * xx + np.sin(theta) * yy)
    t = (t - t.min()) / max(t.max() - t.min(), 1e-9)
    c0, c1 = rng.uniform(0, 1, 3), rng.uniform(0, 1, 3)
    img = c0 * (1 - t[..., None]) + c1 * t[..., None]

    if rng.random() < 0.7:
        period = int(rng.integers(4, 17))
        oy, ox = rng.integers(0, period, size=2)
        iy, ix = np.mgrid[0:extent, 0:extent]
        board = (((iy + oy) // period + (ix + ox) // period) % 2).astype(np.float64)
        tint = rng.uniform(-0.35, 0.35, 3)
        img = img + board[..., None] * tint

    for _ in range(int(rng.integers(0, 4))):
        cy, cx = rng.uniform(0, 1, 2)
        sigma = rng.uniform(0.05, 0.2)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
        img = img * (1 - blob[..., None]) + rng.uniform(0, 1, 3) * blob[..., None]

    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)


def synth_images(n: int, extent: int, seed: int) -> np.ndarray:
    """``(n, extent, extent, 3)`` uint8; image ``i`` depends only on ``(seed, i)``."""
    if extent < 8 or extent % 8:
        raise ValueError(f"extent must be a positive multiple of 8, got {extent}")
    if n < 0:
        raise ValueError("n must be >= 0")
    out = np.empty((n, extent, extent, 3), dtype=np.uint8)
    for i in range(n):
        out[i] = synth_image(np.random.default_rng(np.random.SeedSequence([seed, i])), extent)
    return out


def synth_dataset(out_dir, n: int, extent: int, seed: int) -> list[Path]:
    from .imageio import write_png

    images = synth_images(n, extent, seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, img in enumerate(images):
        p = out / f"img_{i:05d}.png"
        write_png(p, img)
        paths.append(p)
    return paths
