"""Hole masks, composition, perceptual-loss patch boxes and image pyramids."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy import ndimage

from .engine import Tensor
from .engine import ops


class Box(NamedTuple):
    top: int
    left: int
    height: int
    width: int

    @property
    def bottom(self) -> int:
        return self.top + self.height - 1

    @property
    def right(self) -> int:
        return self.left + self.width - 1


@dataclass
class HoleMask:
    """Binary H x W map (1 = hole) plus the rectangles that produced it."""

    bits: np.ndarray
    rects: list[Box] = field(default_factory=list)

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=np.uint8)
        if self.bits.ndim != 2:
            raise ValueError("HoleMask bits must be 2-D")
        if not np.isin(self.bits, (0, 1)).all():
            raise ValueError("HoleMask bits must be 0/1")

    @classmethod
    def from_rects(cls, extent: int | tuple[int, int], rects: Sequence[Box]) -> "HoleMask":
        h, w = (extent, extent) if isinstance(extent, int) else extent
        bits = np.zeros((h, w), dtype=np.uint8)
        for r in rects:
            if r.top < 0 or r.left < 0 or r.top + r.height > h or r.left + r.width > w:
                raise ValueError(f"rectangle {r} outside {h}x{w}")
            bits[r.top:r.top + r.height, r.left:r.left + r.width] = 1
        return cls(bits, [Box(*r) for r in rects])

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape

    def hole_boxes(self) -> list[Box]:
        """Per-hole bounding boxes: the generating rectangles, else connected components."""
        if self.rects:
            return list(self.rects)
        labels, n = ndimage.label(self.bits)
        boxes = []
        for sl in ndimage.find_objects(labels):
            boxes.append(Box(sl[0].start, sl[1].start, sl[0].stop - sl[0].start, sl[1].stop - sl[1].start))
        return boxes


def sample_mask(rng: np.random.Generator, extent: int, max_holes: int = 3) -> HoleMask:
    """One to ``max_holes`` rectangles, each side uniform in [extent/4, extent/2]."""
    if extent < 16:
        raise ValueError("mask extent must be >= 16")
    if max_holes < 1:
        raise ValueError("max_holes must be >= 1")
    lo, hi = extent // 4, extent // 2
    n = int(rng.integers(1, max_holes + 1))
    rects = []
    for _ in range(n):
        h, w = (int(v) for v in rng.integers(lo, hi + 1, size=2))
        top = int(rng.integers(0, extent - h + 1))
        left = int(rng.integers(0, extent - w + 1))
        rects.append(Box(top, left, h, w))
    return HoleMask.from_rects(extent, rects)


def stack_masks(masks: Sequence[HoleMask], dtype=np.float32) -> np.ndarray:
    """N x 1 x H x W float array from a list of masks."""
    return np.stack([m.bits for m in masks])[:, None].astype(dtype)


def composite(prediction: Tensor, source: Tensor, mask: np.ndarray) -> Tensor:
    """Hole pixels from ``prediction``, known pixels from ``source`` (exact select)."""
    if prediction.shape != source.shape:
        raise ValueError(f"composite shape mismatch {prediction.shape} vs {source.shape}")
    m = np.asarray(mask)
    if m.ndim == 2:
        m = m[None, None]
    if m.shape[0] not in (1, prediction.shape[0]) or m.shape[2:] != prediction.shape[2:]:
        raise ValueError(f"mask shape {m.shape} incompatible with {prediction.shape}")
    return ops.select(m > 0.5, prediction, source)


@dataclass
class PatchPair:
    """Local hole crop and its 2x zoomed-out context crop from one image."""

    local_box: Box
    global_box: Box
    local: Tensor
    global_: Tensor
    source: str = ""


def zoom_box(box: Box, extent: tuple[int, int], factor: int = 2) -> Box:
    """Scale ``box`` about its centre by ``factor``, clipped to the image."""
    h, w = extent
    top = box.top - (factor - 1) * box.height // 2
    left = box.left - (factor - 1) * box.width // 2
    bottom = top + factor * box.height
    right = left + factor * box.width
    top, left = max(top, 0), max(left, 0)
    bottom, right = min(bottom, h), min(right, w)
    return Box(top, left, bottom - top, right - left)


def ppl_boxes(mask: HoleMask) -> list[tuple[Box, Box]]:
    boxes = mask.hole_boxes()
    if not boxes:
        raise ValueError("mask has no holes")
    return [(b, zoom_box(b, mask.shape)) for b in boxes]


def extract_ppl_patches(img: Tensor, mask: HoleMask, source: str = "") -> list[PatchPair]:
    """One :class:`PatchPair` per hole of ``mask`` cropped from a 1-image batch."""
    if img.shape[0] != 1:
        raise ValueError("extract_ppl_patches expects a single image (N=1)")
    if img.shape[2:] != mask.shape:
        raise ValueError("mask and image extents differ")
    pairs = []
    for local, wide in ppl_boxes(mask):
        pairs.append(
            PatchPair(local, wide, ops.crop(img, *local), ops.crop(img, *wide), source)
        )
    return pairs


def pyramid(img: Tensor, levels: int = 3) -> list[Tensor]:
    """Average-pooled copies at scales 1, 1/2, 1/4."""
    h, w = img.shape[2:]
    f = 2 ** (levels - 1)
    if h % f or w % f:
        raise ValueError(f"extent {h}x{w} not divisible by {f}")
    return [img] + [ops.avg_pool2d(img, 2**k) for k in range(1, levels)]


def mask_pyramid(mask: np.ndarray, levels: int = 3) -> list[np.ndarray]:
    """Mask copies where a pooled bit is set if any contributing bit is set."""
    m = np.asarray(mask)
    h, w = m.shape[-2:]
    f = 2 ** (levels - 1)
    if h % f or w % f:
        raise ValueError(f"extent {h}x{w} not divisible by {f}")
    out = [m]
    for k in range(1, levels):
        s = 2**k
        shape = m.shape[:-2] + (h // s, s, w // s, s)
        out.append(m.reshape(shape).max(axis=(-3, -1)))
    return out
