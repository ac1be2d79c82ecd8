"""Patch perceptual loss, hole-aware multi-scale patch adversarial losses, annealing."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from decimal import Decimal
from typing import Sequence

import numpy as np

from .engine import Tensor
from .engine import ops
from .masking import HoleMask, PatchPair, ppl_boxes
from .models import FeatureStack

logger = logging.getLogger(__name__)


def decade_scale(value: float, i: int) -> float:
    """``value * 10**-i`` rounded once, so 2e-4 at i=3 is exactly 2e-07."""
    if i < 0:
        raise ValueError("stage must be >= 0")
    return float(Decimal(repr(float(value))).scaleb(-i))


def ala_weight(initial: float, stage: int, enabled: bool = True) -> float:
    """Generator adversarial weight after ``stage`` added blocks."""
    if stage < 0:
        raise ValueError("stage must be >= 0")
    return decade_scale(initial, stage) if enabled else float(initial)


@dataclass
class LossWeights:
    lambda_ppl: float = 10.0
    lambda_adv_initial: float = 1.0
    stage: int = 0
    ala_enabled: bool = True

    @property
    def lambda_adv_current(self) -> float:
        return ala_weight(self.lambda_adv_initial, self.stage, self.ala_enabled)


# perceptual


def _check_layer_weights(fs: FeatureStack) -> None:
    if len(fs.layer_weights) != fs.n_layers:
        raise ValueError(f"{len(fs.layer_weights)} layer weights for {fs.n_layers} feature layers")


def patch_distance(fs: FeatureStack, pred: Tensor, truth: Tensor) -> Tensor:
    """Per-patch weighted feature distance, shape ``(P,)``.

    Sums over layers of the spatially averaged squared norm of the
    channel-weighted difference between unit-normalized features.
    """
    _check_layer_weights(fs)
    if pred.shape != truth.shape:
        raise ValueError("pred/truth patch shapes differ")
    fp = fs(pred)
    ft = fs(truth.detach() if truth.requires_grad else truth)
    total = None
    for l, (a, b) in enumerate(zip(fp, ft)):
        w = fs.layer_weights[l].reshape(1, -1, 1, 1)
        d = (a - b) * w
        hl, wl = d.shape[2:]
        term = ops.scale(ops.sum(d * d, axis=(1, 2, 3)), 1.0 / (hl * wl))
        total = term if total is None else total + term
    return total


def resize_patch(patch: Tensor, extent: int) -> Tensor:
    if patch.shape[2:] == (extent, extent):
        return patch
    return ops.bilinear_resize(patch, extent, extent)


def ppl(fs: FeatureStack, pred: PatchPair, truth: PatchPair) -> Tensor:
    """Local plus global perceptual distance for one hole."""
    e = fs.input_extent
    pred_b = ops.concat([resize_patch(pred.local, e), resize_patch(pred.global_, e)], axis=0)
    truth_b = ops.concat([resize_patch(truth.local, e), resize_patch(truth.global_, e)], axis=0)
    return ops.sum(patch_distance(fs, pred_b, truth_b))


def ppl_batch(fs: FeatureStack, pred: Tensor, truth: Tensor, masks: Sequence[HoleMask]) -> tuple[Tensor, Tensor]:
    """Local and global perceptual losses for a batch.

    Each image contributes the average over its holes; images are averaged.
    """
    e = fs.input_extent
    n = pred.shape[0]
    if len(masks) != n:
        raise ValueError("one mask per image required")
    locals_p, globals_p, locals_t, globals_t, weights = [], [], [], [], []
    for i, m in enumerate(masks):
        pairs = ppl_boxes(m)
        img_p = ops.take(pred, i)
        img_t = Tensor(truth.data[i:i + 1])
        for local, wide in pairs:
            locals_p.append(resize_patch(ops.crop(img_p, *local), e))
            globals_p.append(resize_patch(ops.crop(img_p, *wide), e))
            locals_t.append(resize_patch(ops.crop(img_t, *local), e))
            globals_t.append(resize_patch(ops.crop(img_t, *wide), e))
            weights.append(1.0 / (len(pairs) * n))
    w = np.asarray(weights, dtype=pred.dtype)
    local = ops.sum(patch_distance(fs, ops.concat(locals_p, 0), ops.concat(locals_t, 0)) * w)
    wide = ops.sum(patch_distance(fs, ops.concat(globals_p, 0), ops.concat(globals_t, 0)) * w)
    return local, wide


def l2_recon(pred: Tensor, truth: Tensor, mask: np.ndarray) -> Tensor:
    """Mean squared error over hole pixels (reconstruction-loss ablation)."""
    m = np.broadcast_to(np.asarray(mask, dtype=pred.dtype), pred.shape)
    count = max(float(m.sum()), 1.0)
    d = (pred - truth.detach()) * m
    return ops.scale(ops.sq_sum(d), 1.0 / count)


# adversarial


def _check_maps(preds: Sequence[Tensor], labels: Sequence[np.ndarray]) -> None:
    if len(preds) != len(labels):
        raise ValueError("one label map per scale required")
    for p, q in zip(preds, labels):
        if p.shape != np.shape(q):
            raise ValueError(f"prediction map {p.shape} does not match labels {np.shape(q)}")


def mspal_d(preds_real: Sequence[Tensor], preds_fake: Sequence[Tensor], labels: Sequence[np.ndarray]) -> Tensor:
    """Discriminator loss over all scales.

    Real-image cells target 1; composite cells target their hole-aware label
    (1 for background patches, 0 for patches touching a hole). Per scale the
    two cell means are averaged, then scales are averaged.
    """
    _check_maps(preds_fake, labels)
    _check_maps(preds_real, labels)
    total = None
    for real, fake, q in zip(preds_real, preds_fake, labels):
        lr = ops.mean(ops.bce_with_logits(real, np.ones(real.shape)))
        lf = ops.mean(ops.bce_with_logits(fake, q))
        term = ops.scale(lr + lf, 0.5)
        total = term if total is None else total + term
    return ops.scale(total, 1.0 / len(labels))


def adv_g(preds_fake: Sequence[Tensor], labels: Sequence[np.ndarray]) -> Tensor:
    """Non-saturating generator loss on hole-overlapping cells only.

    Those cells target "real"; scales without any such cell are skipped. With
    no hole-overlapping cell anywhere the loss is zero (a warning is logged).
    """
    _check_maps(preds_fake, labels)
    terms = []
    for fake, q in zip(preds_fake, labels):
        sel = (np.asarray(q) == 0).astype(fake.dtype)
        count = float(sel.sum())
        if count == 0:
            continue
        cell = ops.bce_with_logits(fake, np.ones(fake.shape))
        terms.append(ops.scale(ops.sum(cell * sel), 1.0 / count))
    if not terms:
        logger.warning("adv_g: batch has no hole-overlapping patches")
        return Tensor(np.zeros((), dtype=preds_fake[0].dtype))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return ops.scale(total, 1.0 / len(terms))


def total_g(ppl_val, adv_val, w: LossWeights):
    """Full generator objective ``lambda_adv * adv + lambda_ppl * ppl``."""
    return adv_val * w.lambda_adv_current + ppl_val * w.lambda_ppl


# reporting

CSV_COLUMNS = (
    "iter", "stage", "alpha", "ppl_local", "ppl_global", "adv_g",
    "adv_d1", "adv_d2", "adv_d3", "total_g", "lambda_adv", "lr",
)


@dataclass
class LossReport:
    iter: int
    stage: int
    alpha: float
    ppl_local: float
    ppl_global: float
    adv_g: float
    adv_d: list[float] = field(default_factory=lambda: [0.0, 0.0, 0.0])
    total_g: float = 0.0
    lambda_adv: float = 1.0
    lr: float = 0.0
    adv_g_per_scale: list[float] = field(default_factory=list)
    no_fake_cells: bool = False

    def row(self) -> list:
        return [
            self.iter, self.stage, repr(float(self.alpha)), repr(float(self.ppl_local)),
            repr(float(self.ppl_global)), repr(float(self.adv_g)),
            *(repr(float(v)) for v in self.adv_d), repr(float(self.total_g)),
            repr(float(self.lambda_adv)), repr(float(self.lr)),
        ]

    def check_finite(self) -> None:
        vals = [self.alpha, self.ppl_local, self.ppl_global, self.adv_g, *self.adv_d, self.total_g]
        if not np.all(np.isfinite(vals)):
            raise FloatingPointError(f"non-finite loss at iteration {self.iter}: {self}")
