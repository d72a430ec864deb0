"""Dataset loading and the hand-centred crop applied before training."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..backbone import encode_image
from ..errors import DataError, EmptyMask, ShapeMismatch
from ..metrics import resize_bilinear
from ..pnm import read_pnm
from ..tensor import Tensor
from .synthetic import load_manifest


@dataclass(frozen=True)
class CropBox:
    """Square window ``[y0, y0 + size) x [x0, x0 + size)`` in source pixels."""

    y0: int
    x0: int
    size: int

    def apply(self, img, extent):
        img = np.asarray(img, dtype=np.float64)
        if img.ndim == 2:
            img = img[None]
        window = img[:, self.y0:self.y0 + self.size, self.x0:self.x0 + self.size]
        return resize_bilinear(window, extent, extent)


def crop_box(mask, margin=0.1):
    """Square window centred on the mask's bounding box, grown by ``margin`` per side.

    The window is shrunk to fit the image and shifted inside it when it
    would cross an edge.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 3:
        mask = mask.any(axis=0)
    if not mask.any():
        raise EmptyMask("mask has no foreground pixels")
    h, w = mask.shape
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    y_lo, y_hi = rows[0], rows[-1] + 1
    x_lo, x_hi = cols[0], cols[-1] + 1
    side = max(y_hi - y_lo, x_hi - x_lo)
    size = min(int(np.ceil(side * (1.0 + 2.0 * margin))), h, w)
    cy, cx = (y_lo + y_hi) / 2.0, (x_lo + x_hi) / 2.0
    y0 = int(np.clip(round(cy - size / 2.0), 0, h - size))
    x0 = int(np.clip(round(cx - size / 2.0), 0, w - size))
    return CropBox(y0, x0, size)


def preprocess_crop(image, mask, condition=None, margin=0.1, extent=64):
    """Crop ``image`` (and ``condition``, with the same window) around the mask.

    Returns ``(image_crop, condition_crop, box)``; ``condition_crop`` is None
    when no condition is given.
    """
    image = np.asarray(image, dtype=np.float64)
    if np.shape(mask)[-2:] != image.shape[-2:]:
        raise ShapeMismatch(f"mask {np.shape(mask)} does not match image {image.shape}")
    box = crop_box(mask, margin)
    cond = None if condition is None else box.apply(condition, extent)
    return box.apply(image, extent), cond, box


@dataclass
class Example:
    z0: Tensor
    prompt: str
    condition: np.ndarray
    target: np.ndarray
    name: str


def load_dataset(path, extent, limit=0):
    """Read a manifest directory into training examples.

    Images whose extent differs from ``extent`` are cropped around their
    mask (or resized when they have none).
    """
    root = Path(path)
    records = load_manifest(root)
    if limit:
        records = records[:limit]
    out = []
    for rec in records:
        target = read_pnm(root / rec["image"])
        cond = read_pnm(root / rec["condition"])
        if target.shape[-2:] != cond.shape[-2:]:
            raise DataError(f"{rec['image']}: target and condition extents differ")
        if target.shape[-1] != extent or target.shape[-2] != extent:
            if rec.get("mask"):
                target, cond, _ = preprocess_crop(target, read_pnm(root / rec["mask"])[0] > 0.5, cond, extent=extent)
            else:
                target = resize_bilinear(target, extent, extent)
                cond = resize_bilinear(cond, extent, extent)
        if target.shape[0] == 1:
            target = np.repeat(target, 3, axis=0)
        out.append(Example(Tensor(encode_image(target)), rec["prompt"], cond, target, rec["image"]))
    return out
