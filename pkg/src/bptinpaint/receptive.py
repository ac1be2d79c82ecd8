"""Receptive-field geometry of conv stacks and hole-aware patch labels."""

from __future__ import annotations

import functools
from typing import NamedTuple, Sequence

import numpy as np

from .engine import ConvSpec

REAL, FAKE = 1, 0


class RFRect(NamedTuple):
    """Inclusive pixel bounds in the input image."""

    top: int
    left: int
    bottom: int
    right: int


class RFGeometry(NamedTuple):
    """Per-axis affine receptive-field description of a conv stack.

    Output cell ``i`` sees input rows ``[i*jump + offset, i*jump + offset + size - 1]``
    before clipping.
    """

    size: tuple[int, int]
    jump: tuple[int, int]
    offset: tuple[int, int]


def rf_geometry(specs: Sequence[ConvSpec]) -> RFGeometry:
    size, jump, offset = [1, 1], [1, 1], [0, 0]
    for spec in specs:
        if not isinstance(spec, ConvSpec):
            raise TypeError(f"rf_geometry expects ConvSpec layers, got {type(spec).__name__}")
        ek = spec.effective_kernel()
        for a in range(2):
            offset[a] -= spec.padding * jump[a]
            size[a] += (ek[a] - 1) * jump[a]
            jump[a] *= spec.stride
    return RFGeometry(tuple(size), tuple(jump), tuple(offset))


def stack_output_size(specs: Sequence[ConvSpec], h: int, w: int) -> tuple[int, int]:
    for spec in specs:
        h, w = spec.output_size(h, w)
    return h, w


@functools.lru_cache(maxsize=64)
def _rf_bounds(specs: tuple[ConvSpec, ...], h: int, w: int) -> np.ndarray:
    geo = rf_geometry(specs)
    ho, wo = stack_output_size(specs, h, w)
    ii = np.arange(ho)[:, None]
    jj = np.arange(wo)[None, :]
    top = ii * geo.jump[0] + geo.offset[0]
    left = jj * geo.jump[1] + geo.offset[1]
    bottom = top + geo.size[0] - 1
    right = left + geo.size[1] - 1
    out = np.empty((ho, wo, 4), dtype=np.int64)
    out[..., 0] = np.clip(top, 0, h - 1)
    out[..., 1] = np.clip(left, 0, w - 1)
    out[..., 2] = np.clip(bottom, 0, h - 1)
    out[..., 3] = np.clip(right, 0, w - 1)
    out.flags.writeable = False
    return out


def rf_map(specs: Sequence[ConvSpec], in_extent: int | tuple[int, int]) -> np.ndarray:
    """Clipped receptive rectangle of every output cell, shape ``(Ho, Wo, 4)``.

    The last axis is ``(top, left, bottom, right)``, inclusive. Results are
    cached per (specs, extent).
    """
    h, w = (in_extent, in_extent) if isinstance(in_extent, int) else in_extent
    specs = tuple(specs)
    for s in specs:
        if not isinstance(s, ConvSpec):
            raise TypeError(f"rf_map expects ConvSpec layers, got {type(s).__name__}")
    return _rf_bounds(specs, h, w)


def rf_rects(specs: Sequence[ConvSpec], in_extent) -> list[list[RFRect]]:
    bounds = rf_map(specs, in_extent)
    return [[RFRect(*map(int, cell)) for cell in row] for row in bounds]


def patch_labels(rf: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """1 (real) for cells whose receptive rect avoids every hole pixel, else 0 (fake).

    ``mask`` is H x W, or N x 1 x H x W for a batch (labels then N x 1 x Ho x Wo).
    """
    m = np.asarray(mask)
    batched = m.ndim == 4
    if not batched:
        m = m[None, None]
    h, w = m.shape[-2:]
    if rf[..., 2].max() >= h or rf[..., 3].max() >= w:
        raise ValueError("mask scale does not match receptive-field geometry")
    # summed-area table with a zero border
    sat = np.zeros(m.shape[:2] + (h + 1, w + 1), dtype=np.int64)
    sat[..., 1:, 1:] = (m > 0.5).astype(np.int64).cumsum(-2).cumsum(-1)
    t, l, b, r = (rf[..., k] for k in range(4))
    count = sat[..., b + 1, r + 1] - sat[..., t, r + 1] - sat[..., b + 1, l] + sat[..., t, l]
    labels = np.where(count > 0, FAKE, REAL).astype(np.uint8)
    return labels if batched else labels[0, 0]


def write_rf_csv(specs: Sequence[ConvSpec], in_extent, path) -> None:
    import csv

    bounds = rf_map(specs, in_extent)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["row", "col", "top", "left", "bottom", "right"])
        for i in range(bounds.shape[0]):
            for j in range(bounds.shape[1]):
                writer.writerow([i, j, *map(int, bounds[i, j])])
