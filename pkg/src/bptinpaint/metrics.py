"""Pixel-sum errors, SSIM and the held-out evaluation harness."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.ndimage import correlate1d

logger = logging.getLogger(__name__)

LUMA = np.array([0.299, 0.587, 0.114])
SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    for x in (a, b):
        if x.size and (x.min() < 0.0 or x.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")
    return a, b


def l1_error(a, b) -> float:
    """Sum of absolute differences over every pixel and channel."""
    a, b = _pair(a, b)
    return float(np.abs(a - b).sum())


def l2_error(a, b) -> float:
    """Sum of squared differences over every pixel and channel."""
    a, b = _pair(a, b)
    return float(((a - b) ** 2).sum())


def to_gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.ndim == 3 and img.shape[-1] == 3:
        return img @ LUMA
    raise ValueError(f"expected H x W or H x W x 3 image, got {img.shape}")


def gaussian_window(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    r = len(g) // 2
    out = correlate1d(correlate1d(img, g, axis=0, mode="constant"), g, axis=1, mode="constant")
    return out[r:img.shape[0] - r, r:img.shape[1] - r]


def ssim(a, b) -> float:
    """Mean local SSIM of the luma channels (Gaussian window, valid positions only)."""
    a, b = _pair(a, b)
    x, y = to_gray(a), to_gray(b)
    if min(x.shape) < SSIM_WIN:
        raise ValueError(f"image {x.shape} smaller than the {SSIM_WIN}x{SSIM_WIN} SSIM window")
    g = gaussian_window()
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    num = (2 * mx * my + SSIM_C1) * (2 * sxy + SSIM_C2)
    den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2)
    return float(np.mean(num / den))


def masked_l1(pred, truth, masks) -> float:
    """Mean absolute error over hole pixels, images in [0, 1] as N x H x W x 3."""
    pred, truth = _pair(pred, truth)
    m = np.asarray(masks, dtype=bool)
    if m.shape != pred.shape[:-1]:
        raise ValueError("masks must be N x H x W matching the images")
    diff = np.abs(pred - truth)[m]
    return float(diff.mean()) if diff.size else 0.0


@dataclass
class MetricsRow:
    id: str
    l1: float
    l2: float
    ssim: float

    def as_list(self) -> list:
        return [self.id, repr(self.l1), repr(self.l2), repr(self.ssim)]


def eval_masks(n: int, extent: int, seed: int, max_holes: int = 3) -> np.ndarray:
    """Fixed masks for an evaluation split, ``n x H x W`` uint8."""
    from .masking import sample_mask

    rng = np.random.default_rng(np.random.SeedSequence([seed, 5_000]))
    return np.stack([sample_mask(rng, extent, max_holes).bits for _ in range(n)])


Predictor = Callable[[np.ndarray, np.ndarray], np.ndarray]


def evaluate(predict: Predictor, ids: list[str], images: np.ndarray, masks: np.ndarray) -> tuple[list[MetricsRow], MetricsRow]:
    """Score composited predictions.

    ``predict(images01, masks)`` receives N x H x W x 3 images in [0, 1] and
    N x H x W masks and returns composited images in [0, 1].
    """
    out = np.clip(predict(images, masks), 0.0, 1.0)
    rows = [
        MetricsRow(i, l1_error(o, t), l2_error(o, t), ssim(o, t))
        for i, o, t in zip(ids, out, images)
    ]
    mean = MetricsRow(
        "MEAN",
        float(np.mean([r.l1 for r in rows])),
        float(np.mean([r.l2 for r in rows])),
        float(np.mean([r.ssim for r in rows])),
    )
    return rows, mean


def write_metrics_csv(path, rows: list[MetricsRow], mean: MetricsRow) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "l1", "l2", "ssim"])
        for r in rows:
            w.writerow(r.as_list())
        w.writerow(mean.as_list())


def eval_split(predict: Predictor, dataset_dir, mask_seed: int, out_csv=None, extent: int | None = None):
    """Evaluate every readable PNG in ``dataset_dir`` with seeded masks.

    Returns ``(rows, mean, skipped)``. Raises if no image can be read, in which
    case no CSV is written.
    """
    from .imageio import load_images

    ids, images, skipped = load_images(dataset_dir, extent)
    if skipped:
        logger.warning("%d unreadable images skipped", skipped)
    masks = eval_masks(len(images), images.shape[1], mask_seed)
    rows, mean = evaluate(predict, ids, images, masks)
    if out_csv is not None:
        write_metrics_csv(out_csv, rows, mean)
    return rows, mean, skipped


def generator_predictor(gen) -> Predictor:
    """Wrap a generator (eval mode) as a [0, 1] composited predictor."""
    from .train import predict

    def run(images01: np.ndarray, masks: np.ndarray) -> np.ndarray:
        x = (np.transpose(images01, (0, 3, 1, 2)) * 2.0 - 1.0).astype(np.float32)
        m = masks[:, None].astype(np.float32)
        y = predict(gen, x, m)
        out = (np.transpose(y, (0, 2, 3, 1)).astype(np.float64) + 1.0) / 2.0
        # keep known pixels bit-exact in the [0, 1] domain
        keep = ~masks.astype(bool)
        out[keep] = images01[keep]
        return out

    return run


def identity_predictor(images01: np.ndarray, masks: np.ndarray) -> np.ndarray:
    return np.array(images01, copy=True)
