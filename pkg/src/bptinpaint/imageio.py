"""PNG boundary: 8-bit RGB images in [0, 1] and binary hole masks."""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)


class ImageFormatError(ValueError):
    pass


def _png_bit_depth(path) -> int | None:
    with open(path, "rb") as fh:
        head = fh.read(26)
    if len(head) < 26 or head[:8] != b"\x89PNG\r\n\x1a\n" or head[12:16] != b"IHDR":
        return None
    return head[24]


def _open(path) -> Image.Image:
    try:
        depth = _png_bit_depth(path)
    except OSError as exc:
        raise ImageFormatError(f"{path}: cannot read ({exc})") from exc
    if depth is not None and depth > 8:
        raise ImageFormatError(f"{path}: {depth}-bit PNG not supported, expected 8 bits per channel")
    try:
        img = Image.open(path)
        img.load()
    except (OSError, SyntaxError) as exc:
        raise ImageFormatError(f"{path}: cannot decode image ({exc})") from exc
    return img


def read_png(path) -> np.ndarray:
    """``H x W x 3`` float64 in [0, 1]. Only 8-bit RGB is accepted."""
    img = _open(path)
    if img.mode != "RGB":
        raise ImageFormatError(f"{path}: expected 8-bit RGB, got mode {img.mode!r}")
    return np.asarray(img, dtype=np.float64) / 255.0


def quantize(img01: np.ndarray) -> np.ndarray:
    a = np.asarray(img01)
    if a.dtype == np.uint8:
        return a
    return np.round(np.clip(a, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, img) -> None:
    """Write ``H x W x 3`` uint8, or floats in [0, 1] (rounded to 8 bits)."""
    a = np.asarray(img)
    if a.ndim != 3 or a.shape[2] != 3:
        raise ImageFormatError(f"expected H x W x 3 image, got shape {a.shape}")
    if a.dtype != np.uint8:
        a = quantize(a)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(a).save(path, format="PNG")


def read_mask(path) -> np.ndarray:
    """Binary ``H x W`` uint8 mask: 0 = known, 255 = hole (1 in the result)."""
    img = _open(path)
    if img.mode not in ("L", "1", "P"):
        raise ImageFormatError(f"{path}: mask must be 8-bit grayscale, got mode {img.mode!r}")
    a = np.asarray(img.convert("L"))
    bad = ~np.isin(a, (0, 255))
    if bad.any():
        raise ImageFormatError(f"{path}: mask values must be 0 or 255")
    return (a == 255).astype(np.uint8)


def write_mask(path, bits) -> None:
    a = (np.asarray(bits) > 0).astype(np.uint8) * 255
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(a).save(path, format="PNG")


def list_images(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"{d} is not a directory")
    return sorted(p for p in d.iterdir() if p.suffix.lower() == ".png")


def load_images(directory, extent: int | None = None) -> tuple[list[str], np.ndarray, int]:
    """Decode every PNG in ``directory``.

    Returns ids, an ``N x H x W x 3`` array in [0, 1], and the number of
    files skipped because they could not be read or had the wrong size.
    """
    ids, imgs, skipped = [], [], 0
    for p in list_images(directory):
        try:
            img = read_png(p)
        except ImageFormatError as exc:
            logger.warning("skipping %s", exc)
            skipped += 1
            continue
        if extent is not None and img.shape[:2] != (extent, extent):
            logger.warning("skipping %s: expected %dx%d, got %dx%d", p, extent, extent, *img.shape[:2])
            skipped += 1
            continue
        ids.append(p.stem)
        imgs.append(img)
    if not imgs:
        raise ValueError(f"no readable images in {directory}")
    return ids, np.stack(imgs), skipped
